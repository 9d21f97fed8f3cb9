#include "chunkgrad/checkpoint_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace chunkgrad {

namespace {

constexpr char kMagic[4] = {'C', 'H', 'G', 'D'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  }
  template <class U>
  void put(U x) {
    std::uint64_t bits = 0;
    if constexpr (std::is_floating_point_v<U>) {
      if constexpr (sizeof(U) == 4) {
        bits = std::bit_cast<std::uint32_t>(x);
      } else {
        bits = std::bit_cast<std::uint64_t>(x);
      }
    } else {
      bits = static_cast<std::uint64_t>(x);
    }
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out_.write(buf, sizeof(U));
  }
  void bytes(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void close() {
    out_.flush();
    if (!out_) throw std::runtime_error("checkpoint write failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open " + path.string());
  }
  template <class U>
  U get() {
    unsigned char buf[sizeof(U)];
    in_.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (!in_) throw std::runtime_error("truncated checkpoint");
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    if constexpr (std::is_same_v<U, float>) {
      return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
    } else if constexpr (std::is_same_v<U, double>) {
      return std::bit_cast<double>(bits);
    } else {
      return static_cast<U>(bits);
    }
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) throw std::runtime_error("truncated checkpoint");
    return s;
  }

 private:
  std::ifstream in_;
};

}  // namespace

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Params<T>& params) {
  Writer w(path);
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  const auto& c = params.config;
  for (std::uint64_t x : {c.layers, c.d_model, c.n_heads, c.vocab_size, c.ffn_dim, c.max_position}) {
    w.put<std::uint64_t>(x);
  }
  w.put<double>(c.norm_eps);
  w.put<double>(c.rope_base);

  const auto named = params.named_tensors();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, v] : named) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<std::uint8_t>(dtype_of<T>() == DType::float32 ? 0 : 1);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v.shape().size()));
    for (std::size_t d : v.shape()) w.put<std::uint64_t>(d);
    for (T x : v.data()) w.put<T>(x);
  }
  w.close();
}

template <class T>
Params<T> load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  if (r.str(4) != std::string(kMagic, 4)) throw std::runtime_error(path.string() + " is not a checkpoint");
  if (const auto version = r.get<std::uint32_t>(); version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  c.layers = r.get<std::uint64_t>();
  c.d_model = r.get<std::uint64_t>();
  c.n_heads = r.get<std::uint64_t>();
  c.vocab_size = r.get<std::uint64_t>();
  c.ffn_dim = r.get<std::uint64_t>();
  c.max_position = r.get<std::uint64_t>();
  c.norm_eps = r.get<double>();
  c.rope_base = r.get<double>();
  c.validate();

  std::map<std::string, std::pair<Shape, std::vector<T>>> arrays;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t a = 0; a < count; ++a) {
    std::string name = r.str(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 1) throw std::runtime_error("unknown dtype tag in checkpoint");
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    std::vector<T> data(numel(shape));
    for (auto& x : data) x = dtype == 0 ? static_cast<T>(r.get<float>()) : static_cast<T>(r.get<double>());
    arrays.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
  }

  Params<T> params = init_params<T>(c, 0);
  for (auto& [name, v] : params.named_tensors()) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw std::runtime_error("checkpoint is missing array " + name);
    if (it->second.first != v.shape()) throw std::runtime_error("checkpoint array " + name + " has the wrong shape");
    auto dst = v.mutable_data();
    std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
  }
  return params;
}

template void save_checkpoint(const std::filesystem::path&, const Params<float>&);
template void save_checkpoint(const std::filesystem::path&, const Params<double>&);
template Params<float> load_checkpoint(const std::filesystem::path&);
template Params<double> load_checkpoint(const std::filesystem::path&);

}  // namespace chunkgrad
