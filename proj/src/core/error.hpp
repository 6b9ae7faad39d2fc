// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace snapsoup {

// Error classes map one-to-one onto the C API status codes and the CLI exit
// codes (usage=1, data=2, external=3).
enum class ErrorKind { Usage, Data, External, Io, Internal };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

[[noreturn]] inline void data_error(const std::string& what) { throw Error(ErrorKind::Data, what); }

[[noreturn]] inline void usage_error(const std::string& what) { throw Error(ErrorKind::Usage, what); }

} // namespace snapsoup
