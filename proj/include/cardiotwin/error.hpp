#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cardiotwin {

enum class Errc {
    config,
    parse,
    version,
    validation,
    routing,
    transport,
    parameter,
    numeric,
    shape,
    degenerate_input,
    reference,
    io,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace cardiotwin
