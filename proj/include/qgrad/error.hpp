// Copyright 2026 The qgrad Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace qgrad {

// Base class for everything thrown by this library.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments (bad dimensions, bad fractions, ...).
class config_error : public error {
 public:
  using error::error;
};

// Inputs that are structurally valid but carry bad data (non-finite
// values, dimension mismatches, scheme mismatches, missing samples).
class data_error : public error {
 public:
  using error::error;
};

class dimension_error : public data_error {
 public:
  using data_error::data_error;
};

class scheme_error : public data_error {
 public:
  using data_error::data_error;
};

// Quantized codes outside the representable range for the bitwidth.
class encoding_error : public data_error {
 public:
  using data_error::data_error;
};

// Packed buffers that cannot be decoded (wrong length, bad fields).
class decoding_error : public data_error {
 public:
  using data_error::data_error;
};

// A vector whose codes are all zero where a direction is required.
class degenerate_error : public data_error {
 public:
  using data_error::data_error;
};

// Gradient series not aligned to the checkpoint manifest.
class alignment_error : public data_error {
 public:
  using data_error::data_error;
};

// Samples missing from one or more checkpoint stores.
class coverage_error : public data_error {
 public:
  using data_error::data_error;
};

// Unknown sample id in a store lookup.
class lookup_error : public data_error {
 public:
  using data_error::data_error;
};

// File exists but is not a store we understand (magic/version).
class format_error : public data_error {
 public:
  using data_error::data_error;
};

// Store recognized but payload inconsistent with its header.
class corruption_error : public format_error {
 public:
  using format_error::format_error;
};

// Filesystem-level failures; message always names the path.
class io_error : public error {
 public:
  using error::error;
};

}  // namespace qgrad
