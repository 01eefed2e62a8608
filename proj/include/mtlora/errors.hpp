// Copyright (c) 2026, mtlora authors
// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every module. The CLI maps these onto exit
// codes (see tools/mtlora_cli.cpp).

#pragma once

#include <stdexcept>
#include <string>

namespace mtlora {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand dimensions disagree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf encountered, or an iterative kernel failed to converge.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain of the operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// Operation invoked in the wrong state (e.g. backward without a forward cache).
class StateError : public Error {
public:
    using Error::Error;
};

/// Malformed or incompatible files on disk.
class DataError : public Error {
public:
    using Error::Error;
};

}  // namespace mtlora
