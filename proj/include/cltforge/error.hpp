// Copyright (c) 2026, The clt-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cltforge {

/// Base class for every error raised by the library. The derived type names
/// the failure category; the message carries the specifics.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define CLTFORGE_DEFINE_ERROR(name)                    \
    class name : public Error {                        \
    public:                                            \
        explicit name(const std::string& what)         \
            : Error(std::string(#name ": ") + what) {} \
    }

CLTFORGE_DEFINE_ERROR(ShapeError);
CLTFORGE_DEFINE_ERROR(InputError);
CLTFORGE_DEFINE_ERROR(OrderingError);
CLTFORGE_DEFINE_ERROR(DataError);
CLTFORGE_DEFINE_ERROR(IoError);
CLTFORGE_DEFINE_ERROR(ConfigError);
CLTFORGE_DEFINE_ERROR(IntegrityError);
CLTFORGE_DEFINE_ERROR(StateError);
CLTFORGE_DEFINE_ERROR(TrainingError);
CLTFORGE_DEFINE_ERROR(MergeError);
CLTFORGE_DEFINE_ERROR(LookupError);

#undef CLTFORGE_DEFINE_ERROR

}  // namespace cltforge
