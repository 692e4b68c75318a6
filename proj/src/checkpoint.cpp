#include <array>
#include <bit>
#include <cstdint>
#include <fstream>

#include "iqn/chain.hpp"
#include "iqn/errors.hpp"

namespace iqn {

namespace {

constexpr char kMagic[8] = {'I', 'Q', 'N', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void u64(std::uint64_t x) {
    std::array<char, 8> b;
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((x >> (8 * i)) & 0xffu);
    out_.write(b.data(), 8);
  }
  void u32(std::uint32_t x) {
    std::array<char, 4> b;
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((x >> (8 * i)) & 0xffu);
    out_.write(b.data(), 4);
  }
  void f64(double x) { u64(std::bit_cast<std::uint64_t>(x)); }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void reals(std::span<const double> v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void arch(const MlpArchitecture& a) {
    u64(a.input_dim);
    u64(a.hidden.size());
    for (std::size_t w : a.hidden) u64(w);
    u64(a.output_dim);
  }
  void params(const MlpParams& p) {
    arch(p.arch());
    reals(p.flat());
  }
  void adam(const AdamState& s) {
    f64(s.config.lr);
    f64(s.config.beta1);
    f64(s.config.beta2);
    f64(s.config.eps);
    u64(s.t);
    reals(s.m);
    reals(s.v);
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint64_t u64() {
    std::array<unsigned char, 8> b{};
    read(b.data(), 8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return x;
  }
  std::uint32_t u32() {
    std::array<unsigned char, 4> b{};
    read(b.data(), 4);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return x;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = bounded(u64());
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  std::vector<double> reals() {
    const auto n = bounded(u64());
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  MlpArchitecture arch() {
    MlpArchitecture a;
    a.input_dim = u64();
    const auto layers = bounded(u64());
    for (std::size_t i = 0; i < layers; ++i) a.hidden.push_back(u64());
    a.output_dim = u64();
    return a;
  }
  MlpParams params() {
    auto a = arch();
    return MlpParams(std::move(a), reals());
  }
  AdamState adam() {
    AdamState s;
    s.config.lr = f64();
    s.config.beta1 = f64();
    s.config.beta2 = f64();
    s.config.eps = f64();
    s.t = u64();
    s.m = reals();
    s.v = reals();
    return s;
  }

 private:
  template <typename T>
  void read(T* dst, std::size_t n) {
    in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in_) throw InputError("checkpoint: truncated file");
  }
  static std::size_t bounded(std::uint64_t n) {
    if (n > (std::uint64_t{1} << 32)) throw InputError("checkpoint: implausible length field");
    return static_cast<std::size_t>(n);
  }

  std::istream& in_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  Writer w(out);
  out.write(kMagic, 8);
  w.u32(kVersion);
  w.str(checkpoint.config_json);
  const auto& st = checkpoint.state;
  w.str(st.rng_state);
  const auto& c = st.chain;
  w.u64(c.gradient_events);
  w.u64(c.rolling_updates);
  w.u64(c.window_shifts);
  w.u64(c.since_rolling);
  w.u64(c.since_shift);
  w.u64(c.k());
  for (const auto& p : c.online) w.params(p);
  for (const auto& p : c.target) w.params(p);
  for (const auto& a : c.adam) w.adam(a);
  w.u64(st.snapshots);
  w.u64(st.frozen.size());
  for (const auto& p : st.frozen) w.params(p);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, kMagic)) throw InputError("checkpoint: bad magic");
  Reader r(in);
  if (r.u32() != kVersion) throw InputError("checkpoint: unsupported format version");
  Checkpoint ck;
  ck.config_json = r.str();
  auto& st = ck.state;
  st.rng_state = r.str();
  auto& c = st.chain;
  c.gradient_events = r.u64();
  c.rolling_updates = r.u64();
  c.window_shifts = r.u64();
  c.since_rolling = r.u64();
  c.since_shift = r.u64();
  const auto k = r.u64();
  if (k == 0 || k > 100000) throw InputError("checkpoint: implausible K");
  for (std::uint64_t i = 0; i < k; ++i) c.online.push_back(r.params());
  for (std::uint64_t i = 0; i < k; ++i) c.target.push_back(r.params());
  for (std::uint64_t i = 0; i < k; ++i) c.adam.push_back(r.adam());
  st.snapshots = r.u64();
  const auto frozen = r.u64();
  if (frozen > 1000000) throw InputError("checkpoint: implausible iterate count");
  for (std::uint64_t i = 0; i < frozen; ++i) st.frozen.push_back(r.params());
  return ck;
}

}  // namespace iqn
