#include "sida/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

namespace sida {
namespace {

template <typename UInt>
void put_le(std::ostream& out, UInt value) {
    std::array<char, sizeof(UInt)> bytes{};
    for (std::size_t i = 0; i < sizeof(UInt); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
    out.write(bytes.data(), bytes.size());
}

template <typename UInt>
UInt get_le(std::istream& in) {
    std::array<unsigned char, sizeof(UInt)> bytes{};
    in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (!in) throw CheckpointError("checkpoint: unexpected end of file");
    UInt value = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) value |= static_cast<UInt>(bytes[i]) << (8 * i);
    return value;
}

void put_string(std::ostream& out, const std::string& s) {
    if (s.size() > UINT16_MAX) throw CheckpointError("checkpoint: name too long: " + s);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
    const auto len = get_le<std::uint16_t>(in);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw CheckpointError("checkpoint: truncated string");
    return s;
}

}  // namespace

std::int64_t Checkpoint::config_int(const std::string& key) const {
    for (const auto& [k, v] : config)
        if (k == key) {
            if (const auto* i = std::get_if<std::int64_t>(&v)) return *i;
            throw CheckpointError("checkpoint: config key '" + key + "' is not an integer");
        }
    throw CheckpointError("checkpoint: missing config key '" + key + "'");
}

double Checkpoint::config_real(const std::string& key) const {
    for (const auto& [k, v] : config)
        if (k == key) {
            if (const auto* d = std::get_if<double>(&v)) return *d;
            return static_cast<double>(std::get<std::int64_t>(v));
        }
    throw CheckpointError("checkpoint: missing config key '" + key + "'");
}

const Matrix& Checkpoint::tensor(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
    for (const auto& t : tensors)
        if (t.name == name) {
            if (t.value.rows() != rows || t.value.cols() != cols)
                throw CheckpointError("checkpoint: tensor '" + name + "' has shape " + std::to_string(t.value.rows()) + "x" +
                                      std::to_string(t.value.cols()) + ", expected " + std::to_string(rows) + "x" +
                                      std::to_string(cols));
            return t.value;
        }
    throw CheckpointError("checkpoint: missing tensor '" + name + "'");
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
    if (ckpt.magic.size() != 8) throw CheckpointError("checkpoint: magic must be 8 bytes");
    out.write(ckpt.magic.data(), 8);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config.size()));
    for (const auto& [key, value] : ckpt.config) {
        put_string(out, key);
        if (const auto* i = std::get_if<std::int64_t>(&value)) {
            put_le<std::uint8_t>(out, 0);
            put_le<std::uint64_t>(out, static_cast<std::uint64_t>(*i));
        } else {
            put_le<std::uint8_t>(out, 1);
            put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(std::get<double>(value)));
        }
    }
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        put_string(out, t.name);
        put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.rows()));
        put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.cols()));
        for (Eigen::Index i = 0; i < t.value.size(); ++i) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(t.value.data()[i]));
    }
    if (!out) throw CheckpointError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& in, std::string_view expected_magic) {
    Checkpoint ckpt;
    ckpt.magic.resize(8);
    in.read(ckpt.magic.data(), 8);
    if (!in) throw CheckpointError("checkpoint: file too short for magic");
    if (ckpt.magic != expected_magic)
        throw CheckpointError("checkpoint: bad magic '" + ckpt.magic + "', expected '" + std::string(expected_magic) + "'");
    const auto version = get_le<std::uint32_t>(in);
    if (version != kCheckpointVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));

    const auto n_config = get_le<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < n_config; ++i) {
        std::string key = get_string(in);
        const auto tag = get_le<std::uint8_t>(in);
        const auto raw = get_le<std::uint64_t>(in);
        if (tag == 0)
            ckpt.config.emplace_back(std::move(key), static_cast<std::int64_t>(raw));
        else if (tag == 1)
            ckpt.config.emplace_back(std::move(key), std::bit_cast<double>(raw));
        else
            throw CheckpointError("checkpoint: unknown config tag " + std::to_string(tag));
    }

    const auto n_tensors = get_le<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        NamedTensor t;
        t.name = get_string(in);
        const auto rows = get_le<std::uint64_t>(in);
        const auto cols = get_le<std::uint64_t>(in);
        if (rows > (1ULL << 31) || cols > (1ULL << 31)) throw CheckpointError("checkpoint: implausible shape for " + t.name);
        t.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index j = 0; j < t.value.size(); ++j) t.value.data()[j] = std::bit_cast<double>(get_le<std::uint64_t>(in));
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
    write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view expected_magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
    return read_checkpoint(in, expected_magic);
}

}  // namespace sida
