#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace cadvae {

// Plain SHA-256, used for the checkpoint config digest.
std::array<std::uint8_t, 32> sha256(const std::string& message);
std::string sha256_hex(const std::string& message);

}  // namespace cadvae
