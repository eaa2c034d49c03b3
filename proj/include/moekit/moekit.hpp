/* Copyright 2026 The moekit Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Umbrella header for the whole library.

#include "moekit/accounting.hpp"
#include "moekit/autograd.hpp"
#include "moekit/bench.hpp"
#include "moekit/capture.hpp"
#include "moekit/checkpoint.hpp"
#include "moekit/ffn.hpp"
#include "moekit/io.hpp"
#include "moekit/moe.hpp"
#include "moekit/policy.hpp"
#include "moekit/routing_policy.hpp"
#include "moekit/tensor.hpp"
#include "moekit/trainer.hpp"
#include "moekit/transformer.hpp"
