#pragma once

#include <stdexcept>
#include <string>

namespace sitok {

// Error taxonomy shared by the library and the command line tool.
// The tool maps these onto process exit codes: usage -> 1, data -> 2,
// numerical -> 3.  Anything else is a plain bug and may terminate.

struct usage_error : std::runtime_error {
    explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct data_error : std::runtime_error {
    explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numerical_error : std::runtime_error {
    explicit numerical_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sitok
