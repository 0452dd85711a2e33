#pragma once

// Little-endian binary container shared by MoE and predictor checkpoints.
//
//   magic        8 bytes ("SIDAMOE1" or "SIDAHSH1")
//   version      u32 (currently 1)
//   config count u32, then per entry:
//                  u16 key length, key bytes, u8 tag (0 = i64, 1 = f64), 8 value bytes
//   tensor count u32, then per tensor:
//                  u16 name length, name bytes, u64 rows, u64 cols,
//                  rows*cols IEEE-754 f64 values in row-major order
//
// All integers and floats are little-endian regardless of host byte order.

#include "sida/numkit.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace sida {

inline constexpr std::string_view kMoEMagic = "SIDAMOE1";
inline constexpr std::string_view kPredictorMagic = "SIDAHSH1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using ConfigValue = std::variant<std::int64_t, double>;

struct NamedTensor {
    std::string name;
    Matrix value;
};

struct Checkpoint {
    std::string magic;
    std::vector<std::pair<std::string, ConfigValue>> config;
    std::vector<NamedTensor> tensors;

    std::int64_t config_int(const std::string& key) const;
    double config_real(const std::string& key) const;
    /// Looks up a tensor by name and checks its shape.
    const Matrix& tensor(const std::string& name, Eigen::Index rows, Eigen::Index cols) const;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in, std::string_view expected_magic);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view expected_magic);

}  // namespace sida
