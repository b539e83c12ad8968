// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace eloforge {

// Base class for every error raised by this library.
class EloError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidShape : public EloError { public: using EloError::EloError; };
class ShapeError : public EloError { public: using EloError::EloError; };
class IndexError : public EloError { public: using EloError::EloError; };
class EmptyLossError : public EloError { public: using EloError::EloError; };
class SeqLenError : public EloError { public: using EloError::EloError; };
class ConfigError : public EloError { public: using EloError::EloError; };
class NameError : public EloError { public: using EloError::EloError; };
class SelectionError : public EloError { public: using EloError::EloError; };
class LineageError : public EloError { public: using EloError::EloError; };
class RatioError : public EloError { public: using EloError::EloError; };
class EmptyDataError : public EloError { public: using EloError::EloError; };
class DivergenceError : public EloError { public: using EloError::EloError; };
class MergeError : public EloError { public: using EloError::EloError; };
class FormatError : public EloError { public: using EloError::EloError; };
class CorruptCheckpoint : public EloError { public: using EloError::EloError; };
class IoError : public EloError { public: using EloError::EloError; };

} // namespace eloforge
