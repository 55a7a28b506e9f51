#include "rigidreg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rigidreg {

namespace {

constexpr char kMagic[4] = {'3', 'D', 'R', 'N'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}

bool get_bytes(std::istream& is, void* dst, size_t count) {
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count));
  return is.gcount() == static_cast<std::streamsize>(count);
}

bool get_u32(std::istream& is, uint32_t& v) {
  unsigned char b[4];
  if (!get_bytes(is, b, 4)) return false;
  v = static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
      static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
  return true;
}

bool get_f32(std::istream& is, float& v) {
  uint32_t u;
  if (!get_u32(is, u)) return false;
  std::memcpy(&v, &u, 4);
  return true;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params) {
  if (params.configs.empty() || params.configs.size() > 2)
    throw std::invalid_argument("checkpoint: one or two configs expected");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  uint8_t ncfg = static_cast<uint8_t>(params.configs.size());
  os.write(reinterpret_cast<const char*>(&ncfg), 1);
  for (const RegNetConfig& c : params.configs) {
    put_u32(os, static_cast<uint32_t>(c.blocks));
    put_u32(os, static_cast<uint32_t>(c.width));
    put_u32(os, static_cast<uint32_t>(c.conv_channels));
    put_u32(os, static_cast<uint32_t>(c.conv_kh));
    put_u32(os, static_cast<uint32_t>(c.conv_kw));
    put_u32(os, static_cast<uint32_t>(c.conv_stride_row));
    put_u32(os, static_cast<uint32_t>(c.conv_stride_col));
    put_u32(os, static_cast<uint32_t>(c.head_hidden));
    uint8_t rot = static_cast<uint8_t>(c.rotation);
    uint8_t head = static_cast<uint8_t>(c.head);
    os.write(reinterpret_cast<const char*>(&rot), 1);
    os.write(reinterpret_cast<const char*>(&head), 1);
    put_f32(os, static_cast<float>(c.weight_threshold));
  }
  put_u32(os, static_cast<uint32_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(t.dims.size()));
    for (int d : t.dims) put_u32(os, static_cast<uint32_t>(d));
    for (double v : t.data) put_f32(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  if (!get_bytes(is, magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic (not a checkpoint file)");
  uint32_t version = 0;
  if (!get_u32(is, version)) throw std::runtime_error("checkpoint: truncated header");
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  uint8_t ncfg = 0;
  if (!get_bytes(is, &ncfg, 1) || ncfg < 1 || ncfg > 2)
    throw std::runtime_error("checkpoint: bad config count");

  ModelParams params;
  for (int k = 0; k < ncfg; ++k) {
    RegNetConfig c;
    uint32_t u = 0;
    auto next = [&]() {
      if (!get_u32(is, u)) throw std::runtime_error("checkpoint: truncated config");
      return static_cast<int>(u);
    };
    c.blocks = next();
    c.width = next();
    c.conv_channels = next();
    c.conv_kh = next();
    c.conv_kw = next();
    c.conv_stride_row = next();
    c.conv_stride_col = next();
    c.head_hidden = next();
    uint8_t rot = 0, head = 0;
    float thr = 0;
    if (!get_bytes(is, &rot, 1) || !get_bytes(is, &head, 1) || !get_f32(is, thr))
      throw std::runtime_error("checkpoint: truncated config");
    if (rot > 2 || head > 1) throw std::runtime_error("checkpoint: bad config enums");
    c.rotation = static_cast<RotationMode>(rot);
    c.head = static_cast<HeadKind>(head);
    c.weight_threshold = thr;
    c.validate();
    params.configs.push_back(c);
  }

  // expected tensor inventory from the embedded configs
  std::map<std::string, std::vector<int>> expected;
  for (size_t s = 0; s < params.configs.size(); ++s)
    for (auto& [name, dims] :
         stage_tensor_shapes(params.configs[s], "s" + std::to_string(s + 1) + "."))
      expected[name] = dims;

  uint32_t count = 0;
  if (!get_u32(is, count)) throw std::runtime_error("checkpoint: truncated tensor table");
  for (uint32_t k = 0; k < count; ++k) {
    uint32_t len = 0;
    if (!get_u32(is, len) || len > 4096) throw std::runtime_error("checkpoint: bad tensor name");
    std::string name(len, '\0');
    if (!get_bytes(is, name.data(), len)) throw std::runtime_error("checkpoint: truncated name");
    uint32_t rank = 0;
    if (!get_u32(is, rank) || rank > 4)
      throw std::runtime_error("checkpoint: bad rank for tensor " + name);
    std::vector<int> dims;
    for (uint32_t d = 0; d < rank; ++d) {
      uint32_t v = 0;
      if (!get_u32(is, v)) throw std::runtime_error("checkpoint: truncated dims for " + name);
      dims.push_back(static_cast<int>(v));
    }
    auto it = expected.find(name);
    if (it == expected.end())
      throw std::runtime_error("checkpoint: unexpected tensor " + name);
    if (it->second != dims)
      throw std::runtime_error("checkpoint: shape mismatch for tensor " + name);
    ad::Tensor t = ad::Tensor::zeros(dims);
    for (double& v : t.data) {
      float f = 0;
      if (!get_f32(is, f))
        throw std::runtime_error("checkpoint: shape mismatch for tensor " + name +
                                 " (payload truncated)");
      v = f;
    }
    params.tensors[name] = std::move(t);
  }
  for (const auto& [name, dims] : expected)
    if (!params.tensors.count(name))
      throw std::runtime_error("checkpoint: missing tensor " + name);
  return params;
}

}  // namespace rigidreg
