#include "bct/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace bct {

static_assert(std::endian::native == std::endian::little,
              "snapshot I/O assumes a little-endian host");

namespace {

constexpr std::array<char, 4> kMagic = {'B', 'C', 'T', 'S'};
constexpr std::uint32_t kVersion = 1;

template <typename Int>
void put(std::ostream& out, Int v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename Int>
Int get(std::istream& in, const char* what) {
  Int v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw IoError(std::string("snapshot truncated while reading ") + what);
  }
  return v;
}

struct Header {
  std::uint32_t element_bytes;
  SnapshotKind kind;
  std::uint64_t tokens_seen;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> shapes;
};

Header read_header(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw IoError("not a snapshot (bad magic)");
  }
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kVersion) {
    throw IoError("unsupported snapshot version " + std::to_string(version));
  }
  Header h;
  h.element_bytes = get<std::uint32_t>(in, "element width");
  const auto kind = get<std::uint32_t>(in, "kind");
  if (kind > static_cast<std::uint32_t>(SnapshotKind::kCheckpoint)) {
    throw IoError("unknown snapshot kind " + std::to_string(kind));
  }
  h.kind = static_cast<SnapshotKind>(kind);
  h.tokens_seen = get<std::uint64_t>(in, "tokens_seen");
  const auto count = get<std::uint32_t>(in, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rows = get<std::uint64_t>(in, "shape");
    const auto cols = get<std::uint64_t>(in, "shape");
    h.shapes.emplace_back(rows, cols);
  }
  return h;
}

template <typename T>
void expect_kind(const Snapshot<T>& snap, SnapshotKind kind, std::size_t min_tensors) {
  if (snap.kind != kind) throw ConfigError("snapshot holds a different payload kind");
  if (snap.tensors.size() < min_tensors) throw ConfigError("snapshot has too few tensors");
}

void expect_shape(std::size_t rows, std::size_t cols, std::size_t want_rows, std::size_t want_cols,
                  const std::string& what) {
  if (rows != want_rows || cols != want_cols) {
    throw ConfigError("snapshot tensor " + what + " is " + std::to_string(rows) + "x" +
                      std::to_string(cols) + ", config expects " + std::to_string(want_rows) +
                      "x" + std::to_string(want_cols));
  }
}

}  // namespace

template <typename T>
void write_snapshot(std::ostream& out, const Snapshot<T>& snap) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, sizeof(T));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(snap.kind));
  put<std::uint64_t>(out, snap.tokens_seen);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(snap.tensors.size()));
  for (const auto& m : snap.tensors) {
    put<std::uint64_t>(out, m.rows());
    put<std::uint64_t>(out, m.cols());
  }
  for (const auto& m : snap.tensors) {
    out.write(reinterpret_cast<const char*>(m.data().data()),
              static_cast<std::streamsize>(m.payload_bytes()));
  }
  if (!out) throw IoError("snapshot write failed");
}

std::uint32_t peek_element_bytes(std::istream& in) {
  const auto pos = in.tellg();
  const auto h = read_header(in);
  in.clear();
  in.seekg(pos);
  return h.element_bytes;
}

template <typename T>
Snapshot<T> read_snapshot(std::istream& in) {
  const auto h = read_header(in);
  if (h.element_bytes != sizeof(T)) {
    throw ConfigError("snapshot element width is " + std::to_string(8 * h.element_bytes) +
                      "-bit, reader expects " + std::to_string(8 * sizeof(T)) + "-bit");
  }
  Snapshot<T> snap;
  snap.kind = h.kind;
  snap.tokens_seen = h.tokens_seen;
  for (const auto& [rows, cols] : h.shapes) {
    Matrix<T> m(rows, cols);
    if (!in.read(reinterpret_cast<char*>(m.data().data()),
                 static_cast<std::streamsize>(m.payload_bytes()))) {
      throw IoError("snapshot truncated in payload");
    }
    snap.tensors.push_back(std::move(m));
  }
  return snap;
}

template <typename T>
void save_snapshot(const std::string& path, const Snapshot<T>& snap) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  try {
    write_snapshot(out, snap);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

template <typename T>
Snapshot<T> load_snapshot(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return read_snapshot<T>(in);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

template <typename T>
Snapshot<T> to_snapshot(const LayerParams<T>& params) {
  Snapshot<T> snap;
  snap.kind = SnapshotKind::kLayerParams;
  params.for_each_tensor([&](const std::string&, const Matrix<T>& m) { snap.tensors.push_back(m); });
  return snap;
}

template <typename T>
LayerParams<T> params_from_snapshot(const Snapshot<T>& snap, const ModelConfig& config) {
  if (snap.kind != SnapshotKind::kLayerParams && snap.kind != SnapshotKind::kCheckpoint) {
    throw ConfigError("snapshot does not hold layer parameters");
  }
  const std::size_t needed = 4 * config.n_heads + 1;
  if (snap.tensors.size() < needed) throw ConfigError("snapshot has too few tensors");
  LayerParams<T> params;
  params.heads.resize(config.n_heads);
  params.W_o = Matrix<T>(config.n_heads * config.d_v, config.d_model);
  for (std::size_t h = 0; h < config.n_heads; ++h) {
    params.heads[h] = {Matrix<T>(config.d_model, config.d_k), Matrix<T>(config.d_model, config.d_v),
                       Matrix<T>(config.d_model, config.d_k), Matrix<T>(config.capacity, config.d_k)};
  }
  std::size_t i = 0;
  params.for_each_tensor([&](const std::string& name, Matrix<T>& m) {
    const auto& src = snap.tensors[i++];
    expect_shape(src.rows(), src.cols(), m.rows(), m.cols(), name);
    m = src;
  });
  return params;
}

template <typename T>
Snapshot<T> to_snapshot(const CacheState<T>& state) {
  Snapshot<T> snap;
  snap.kind = SnapshotKind::kCacheState;
  snap.tokens_seen = state.tokens_seen;
  for (const auto& h : state.heads) {
    snap.tensors.push_back(h.MK);
    snap.tensors.push_back(h.MV);
  }
  return snap;
}

template <typename T>
CacheState<T> cache_from_snapshot(const Snapshot<T>& snap, const ModelConfig& config) {
  expect_kind(snap, SnapshotKind::kCacheState, 2 * config.n_heads);
  if (snap.tensors.size() != 2 * config.n_heads) throw ConfigError("cache snapshot head count mismatch");
  CacheState<T> state;
  state.tokens_seen = snap.tokens_seen;
  for (std::size_t h = 0; h < config.n_heads; ++h) {
    const auto& mk = snap.tensors[2 * h];
    const auto& mv = snap.tensors[2 * h + 1];
    expect_shape(mk.rows(), mk.cols(), config.capacity, config.d_k, "MK");
    expect_shape(mv.rows(), mv.cols(), config.capacity, config.d_v, "MV");
    state.heads.push_back({mk, mv});
  }
  return state;
}

template <typename T>
Snapshot<T> to_snapshot(const BaselineParams<T>& params) {
  Snapshot<T> snap;
  snap.kind = SnapshotKind::kBaselineParams;
  params.for_each_tensor([&](const char*, const Matrix<T>& m) { snap.tensors.push_back(m); });
  return snap;
}

#define BCT_INSTANTIATE_SERIALIZE(T)                                                       \
  template void write_snapshot(std::ostream&, const Snapshot<T>&);                         \
  template Snapshot<T> read_snapshot<T>(std::istream&);                                    \
  template void save_snapshot(const std::string&, const Snapshot<T>&);                     \
  template Snapshot<T> load_snapshot<T>(const std::string&);                               \
  template Snapshot<T> to_snapshot(const LayerParams<T>&);                                 \
  template LayerParams<T> params_from_snapshot(const Snapshot<T>&, const ModelConfig&);    \
  template Snapshot<T> to_snapshot(const CacheState<T>&);                                  \
  template CacheState<T> cache_from_snapshot(const Snapshot<T>&, const ModelConfig&);      \
  template Snapshot<T> to_snapshot(const BaselineParams<T>&);

BCT_INSTANTIATE_SERIALIZE(float)
BCT_INSTANTIATE_SERIALIZE(double)

}  // namespace bct
