#pragma once

// Flat binary snapshot format (all integers little-endian):
//
//   offset  size  field
//   0       4     magic "BCTS"
//   4       4     u32 version (1)
//   8       4     u32 element width in bytes (4 or 8)
//   12      4     u32 payload kind (see SnapshotKind)
//   16      8     u64 tokens_seen (cache snapshots; 0 otherwise)
//   24      4     u32 tensor count K
//   28      16*K  K x (u64 rows, u64 cols)
//   ...           K row-major payloads, concatenated, in header order
//
// Layer parameters list, per head, W_wq W_wv W_rq MK, then W_o. Cache
// snapshots list, per head, MK MV. Checkpoints are layer parameters followed
// by the classifier weight and bias.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "bct/baseline.hpp"
#include "bct/layer.hpp"

namespace bct {

enum class SnapshotKind : std::uint32_t {
  kLayerParams = 0,
  kCacheState = 1,
  kBaselineParams = 2,
  kCheckpoint = 3,
};

template <typename T>
struct Snapshot {
  SnapshotKind kind = SnapshotKind::kLayerParams;
  std::uint64_t tokens_seen = 0;
  std::vector<Matrix<T>> tensors;
};

template <typename T>
void write_snapshot(std::ostream& out, const Snapshot<T>& snap);

// Throws IoError on truncation/bad magic and ConfigError on a width mismatch.
template <typename T>
Snapshot<T> read_snapshot(std::istream& in);

// Element width recorded in a snapshot header, without reading payloads.
std::uint32_t peek_element_bytes(std::istream& in);

template <typename T>
void save_snapshot(const std::string& path, const Snapshot<T>& snap);
template <typename T>
Snapshot<T> load_snapshot(const std::string& path);

template <typename T>
Snapshot<T> to_snapshot(const LayerParams<T>& params);
template <typename T>
LayerParams<T> params_from_snapshot(const Snapshot<T>& snap, const ModelConfig& config);

template <typename T>
Snapshot<T> to_snapshot(const CacheState<T>& state);
template <typename T>
CacheState<T> cache_from_snapshot(const Snapshot<T>& snap, const ModelConfig& config);

template <typename T>
Snapshot<T> to_snapshot(const BaselineParams<T>& params);

}  // namespace bct
