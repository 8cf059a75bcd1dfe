#pragma once

// Layer-similarity analysis (linear CKA, adjacent attention cosine) and
// attention-mass masks scored with Jaccard.

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "skipat/vit.hpp"

namespace skipat {

/// Linear CKA of m×p and m×q representations (rows are samples), computed in
/// f64 from the m×m Gram matrices of the column-centered inputs. When either
/// centered input is all zero the result is 1 if both are, else 0.
double linear_cka(const Tensor<double>& x, const Tensor<double>& y);

enum class CkaTarget { attn_cls, attn_all, zmsa };

const char* cka_target_name(CkaTarget target);
CkaTarget parse_cka_target(const std::string& name);

/// Head-mean attention row of the CLS token over the patch tokens (length n).
template <typename T>
std::vector<double> cls_attention(const Tensor<T>& attn);

/// Per-layer representation of one sample for `target`, or empty when the
/// layer has no attention of its own (skipped layers).
template <typename T>
std::vector<double> layer_representation(const LayerTrace<T>& layer, CkaTarget target,
                                         const ModelConfig& config);

struct CkaMatrix {
  CkaTarget target = CkaTarget::zmsa;
  std::size_t sample_count = 0;
  std::string fingerprint;
  std::vector<std::size_t> layers;  // 1-based layer ids
  std::vector<bool> present;        // false: representation absent at that layer
  Tensor<double> values;            // L×L, NaN where either layer is absent

  double at(std::size_t i, std::size_t j) const { return values(i, j); }
};

/// One trace per sample. Throws with fewer than two samples, and for
/// attention targets on configs without a CLS token (attn_cls).
template <typename T>
CkaMatrix cka_matrix(std::span<const ForwardTrace<T>> traces, CkaTarget target,
                     const ModelConfig& config);

/// Cosine of head-mean CLS attention between layers l and l−1, for l = 2..L.
/// NaN where either layer has no attention; 0 when either vector is zero.
template <typename T>
std::vector<double> adjacent_cosine(const ForwardTrace<T>& trace);

struct BoolGrid {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> cells;  // row-major 0/1

  std::size_t count() const;
  bool operator==(const BoolGrid&) const = default;
};

struct MaskResult {
  BoolGrid mask;
  double mass_kept = 0;  // selected mass over total mass
  std::string source;
};

/// Keeps the largest cells (ties by ascending index) until their sum reaches
/// threshold·total. The mask is √n×√n when n is a perfect square, else 1×n.
MaskResult mass_threshold_mask(std::span<const double> attn, double threshold,
                               std::string source = {});

/// |P∩G| / |P∪G|, 1 when both are empty.
double jaccard(const BoolGrid& pred, const BoolGrid& gt);

std::string cka_to_csv(const CkaMatrix& m);
std::string cka_to_svg(const CkaMatrix& m);
std::string grid_to_csv(const BoolGrid& g);
/// Parses rows of comma-separated 0/1 values.
BoolGrid grid_from_csv(const std::string& text);

}  // namespace skipat
