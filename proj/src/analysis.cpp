#include "skipat/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "skipat/binary_io.hpp"

namespace skipat {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Column-centered copy. Constant columns become exact zeros, so duplicated
// samples give a zero matrix instead of rounding residue.
MatD centered(const Tensor<double>& x) {
  const std::size_t m = x.rows(), p = x.cols();
  MatD out(m, p);
  for (std::size_t j = 0; j < p; ++j) {
    bool constant = true;
    double sum = 0;
    for (std::size_t i = 0; i < m; ++i) {
      sum += x(i, j);
      constant = constant && x(i, j) == x(0, j);
    }
    const double mean = sum / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) out(i, j) = constant ? 0.0 : x(i, j) - mean;
  }
  return out;
}

const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt9(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

double linear_cka(const Tensor<double>& x, const Tensor<double>& y) {
  if (x.rank() != 2 || y.rank() != 2) throw ShapeError("linear_cka expects matrices");
  if (x.rows() != y.rows()) {
    throw ShapeError("linear_cka: sample counts differ (" + std::to_string(x.rows()) + " vs " +
                     std::to_string(y.rows()) + ")");
  }
  if (x.rows() < 2) throw std::invalid_argument("linear_cka needs at least 2 samples");
  const MatD xc = centered(x), yc = centered(y);
  const MatD kx = xc * xc.transpose();
  const MatD ky = yc * yc.transpose();
  const double nx = kx.norm(), ny = ky.norm();
  if (nx == 0.0 || ny == 0.0) return nx == 0.0 && ny == 0.0 ? 1.0 : 0.0;
  // ‖Ycᵀ Xc‖_F² = <Kx, Ky>_F, ‖XcᵀXc‖_F = ‖Kx‖_F
  return kx.cwiseProduct(ky).sum() / (nx * ny);
}

const char* cka_target_name(CkaTarget t) {
  switch (t) {
    case CkaTarget::attn_cls: return "attn_cls";
    case CkaTarget::attn_all: return "attn_all";
    case CkaTarget::zmsa: return "zmsa";
  }
  return "unknown";
}

CkaTarget parse_cka_target(const std::string& name) {
  for (CkaTarget t : {CkaTarget::attn_cls, CkaTarget::attn_all, CkaTarget::zmsa}) {
    if (name == cka_target_name(t)) return t;
  }
  throw ConfigError("unknown CKA target '" + name + "' (expected attn_cls, attn_all or zmsa)");
}

template <typename T>
std::vector<double> cls_attention(const Tensor<T>& attn) {
  if (attn.rank() != 3 || attn.dim(1) != attn.dim(2) || attn.dim(1) < 2) {
    throw ShapeError("attention must be h×N×N, got " + dims_to_string(attn.dims()));
  }
  const std::size_t h = attn.dim(0), n_tok = attn.dim(1);
  std::vector<double> out(n_tok - 1, 0.0);
  for (std::size_t k = 0; k < h; ++k) {
    const T* row = attn.data() + k * n_tok * n_tok;
    for (std::size_t j = 1; j < n_tok; ++j) out[j - 1] += static_cast<double>(row[j]);
  }
  for (double& v : out) v /= static_cast<double>(h);
  return out;
}

template <typename T>
std::vector<double> layer_representation(const LayerTrace<T>& layer, CkaTarget target,
                                         const ModelConfig& config) {
  if (target == CkaTarget::zmsa) {
    return std::vector<double>(layer.zmsa.data(), layer.zmsa.data() + layer.zmsa.size());
  }
  if (layer.skipped || !layer.attn) return {};
  if (target == CkaTarget::attn_cls) {
    if (!config.use_cls_token) throw ConfigError("attn_cls needs a config with a CLS token");
    return cls_attention(*layer.attn);
  }
  const Tensor<T>& a = *layer.attn;
  const std::size_t h = a.dim(0), n_tok = a.dim(1);
  const std::size_t off = config.use_cls_token ? 1 : 0;
  const std::size_t n = n_tok - off;
  std::vector<double> out(n * n, 0.0);
  for (std::size_t k = 0; k < h; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        out[i * n + j] += static_cast<double>(a[(k * n_tok + i + off) * n_tok + j + off]);
      }
    }
  }
  for (double& v : out) v /= static_cast<double>(h);
  return out;
}

template <typename T>
CkaMatrix cka_matrix(std::span<const ForwardTrace<T>> traces, CkaTarget target,
                     const ModelConfig& config) {
  if (traces.size() < 2) {
    throw std::invalid_argument("cka_matrix needs at least 2 samples, got " +
                                std::to_string(traces.size()));
  }
  const std::size_t depth = traces[0].layers.size();
  const std::size_t m = traces.size();
  CkaMatrix out;
  out.target = target;
  out.sample_count = m;
  out.fingerprint = config_fingerprint(config);
  out.values = Tensor<double>({depth, depth}, kNaN);

  std::vector<Tensor<double>> reps(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    out.layers.push_back(l + 1);
    const auto first = layer_representation(traces[0].layers[l], target, config);
    out.present.push_back(!first.empty());
    if (first.empty()) continue;
    Tensor<double> rep({m, first.size()});
    for (std::size_t s = 0; s < m; ++s) {
      if (traces[s].layers.size() != depth) throw ShapeError("traces have different depths");
      const auto row =
          s == 0 ? first : layer_representation(traces[s].layers[l], target, config);
      if (row.size() != first.size()) {
        throw ShapeError("representation sizes differ across samples");
      }
      std::copy(row.begin(), row.end(), &rep(s, 0));
    }
    reps[l] = std::move(rep);
  }
  for (std::size_t i = 0; i < depth; ++i) {
    if (!out.present[i]) continue;
    for (std::size_t j = i; j < depth; ++j) {
      if (!out.present[j]) continue;
      const double v = linear_cka(reps[i], reps[j]);
      out.values(i, j) = v;
      out.values(j, i) = v;
    }
  }
  return out;
}

template <typename T>
std::vector<double> adjacent_cosine(const ForwardTrace<T>& trace) {
  std::vector<double> out;
  for (std::size_t l = 1; l < trace.layers.size(); ++l) {
    const auto& a = trace.layers[l - 1];
    const auto& b = trace.layers[l];
    if (!a.attn || !b.attn || a.skipped || b.skipped) {
      out.push_back(kNaN);
      continue;
    }
    const auto x = cls_attention(*a.attn), y = cls_attention(*b.attn);
    double dot = 0, nx = 0, ny = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      dot += x[i] * y[i];
      nx += x[i] * x[i];
      ny += y[i] * y[i];
    }
    out.push_back(nx == 0 || ny == 0 ? 0.0 : dot / (std::sqrt(nx) * std::sqrt(ny)));
  }
  return out;
}

std::size_t BoolGrid::count() const {
  return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
}

MaskResult mass_threshold_mask(std::span<const double> attn, double threshold,
                               std::string source) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument("mass threshold must be in (0, 1]");
  }
  if (attn.empty()) throw std::invalid_argument("empty attention vector");
  for (double v : attn) {
    if (!(v >= 0.0)) throw std::invalid_argument("attention entries must be non-negative");
  }
  std::vector<std::size_t> order(attn.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return attn[a] > attn[b]; });
  // Summing in selection order makes the full prefix equal the total exactly.
  double total = 0;
  for (std::size_t i : order) total += attn[i];
  if (total == 0.0) throw std::invalid_argument("attention is all zero");

  MaskResult out;
  out.source = std::move(source);
  const std::size_t n = attn.size();
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  out.mask.rows = side * side == n ? side : 1;
  out.mask.cols = n / out.mask.rows;
  out.mask.cells.assign(n, 0);

  // A relative slack of a few ulps keeps sums like 0.5 + 0.3 from missing a
  // 0.8 target through rounding alone.
  const double target = threshold * total * (1.0 - 1e-12);
  double kept = 0;
  for (std::size_t i : order) {
    if (threshold < 1.0 && kept >= target) break;
    if (attn[i] == 0.0) break;
    out.mask.cells[i] = 1;
    kept += attn[i];
  }
  out.mass_kept = kept / total;
  return out;
}

double jaccard(const BoolGrid& pred, const BoolGrid& gt) {
  if (pred.rows != gt.rows || pred.cols != gt.cols || pred.cells.size() != gt.cells.size()) {
    throw ShapeError("jaccard: mask dims " + std::to_string(pred.rows) + "x" +
                     std::to_string(pred.cols) + " vs " + std::to_string(gt.rows) + "x" +
                     std::to_string(gt.cols));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.cells.size(); ++i) {
    inter += pred.cells[i] && gt.cells[i];
    uni += pred.cells[i] || gt.cells[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::string cka_to_csv(const CkaMatrix& m) {
  std::ostringstream out;
  out << "layer";
  for (std::size_t l : m.layers) out << "," << l;
  out << "\n";
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    out << m.layers[i];
    for (std::size_t j = 0; j < m.layers.size(); ++j) out << "," << fmt9(m.at(i, j));
    out << "\n";
  }
  return out.str();
}

std::string cka_to_svg(const CkaMatrix& m) {
  const std::size_t count = m.layers.size();
  const int cell = 32, margin = 40;
  const int size = margin + static_cast<int>(count) * cell + 8;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<title>CKA " << cka_target_name(m.target) << " (" << m.sample_count
      << " samples)</title>\n";
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < count; ++j) {
      const double v = m.at(i, j);
      std::string fill = "#bbbbbb";
      if (!std::isnan(v)) {
        // blue (0) to yellow (1)
        const double t = std::clamp(v, 0.0, 1.0);
        char buf[16];
        std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(255 * t)),
                      static_cast<int>(std::lround(255 * t)),
                      static_cast<int>(std::lround(255 * (1 - t))));
        fill = buf;
      }
      out << "<rect x=\"" << margin + static_cast<int>(j) * cell << "\" y=\""
          << margin + static_cast<int>(i) * cell << "\" width=\"" << cell << "\" height=\""
          << cell << "\" fill=\"" << fill << "\" stroke=\"#ffffff\"><title>" << m.layers[i]
          << "," << m.layers[j] << ": " << fmt9(v) << "</title></rect>\n";
    }
    const int mid = margin + static_cast<int>(i) * cell + cell / 2;
    out << "<text x=\"" << margin - 6 << "\" y=\"" << mid + 4 << "\" text-anchor=\"end\">"
        << m.layers[i] << "</text>\n";
    out << "<text x=\"" << mid << "\" y=\"" << margin - 8 << "\" text-anchor=\"middle\">"
        << m.layers[i] << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string grid_to_csv(const BoolGrid& g) {
  std::ostringstream out;
  for (std::size_t r = 0; r < g.rows; ++r) {
    for (std::size_t c = 0; c < g.cols; ++c) {
      out << (c ? "," : "") << static_cast<int>(g.cells[r * g.cols + c]);
    }
    out << "\n";
  }
  return out.str();
}

BoolGrid grid_from_csv(const std::string& text) {
  BoolGrid g;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t cols = 0;
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      if (cell != "0" && cell != "1") {
        throw FormatError("mask cells must be 0 or 1, got '" + cell + "'");
      }
      g.cells.push_back(cell == "1" ? 1 : 0);
      ++cols;
    }
    if (g.rows == 0) g.cols = cols;
    if (cols != g.cols) throw FormatError("mask rows have different lengths");
    ++g.rows;
  }
  return g;
}

#define SKIPAT_INSTANTIATE_ANALYSIS(T)                                                        \
  template std::vector<double> cls_attention(const Tensor<T>&);                               \
  template std::vector<double> layer_representation(const LayerTrace<T>&, CkaTarget,         \
                                                    const ModelConfig&);                      \
  template CkaMatrix cka_matrix(std::span<const ForwardTrace<T>>, CkaTarget,                  \
                                const ModelConfig&);                                          \
  template std::vector<double> adjacent_cosine(const ForwardTrace<T>&);

SKIPAT_INSTANTIATE_ANALYSIS(float)
SKIPAT_INSTANTIATE_ANALYSIS(double)

}  // namespace skipat
