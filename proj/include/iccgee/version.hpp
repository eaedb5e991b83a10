#pragma once

namespace iccgee {
inline constexpr const char* kVersion = "0.1.0";
}
