// SPDX-License-Identifier: Apache-2.0

#include "cinr/viz.hpp"

#include "cinr/errors.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace cinr {

std::vector<Index> top_variance_neurons(const Matrix<double>& activations, int k) {
  const Index d = activations.cols();
  if (k < 1 || k > d)
    throw ConfigError("cannot select " + std::to_string(k) + " neurons from a layer of width " + std::to_string(d));
  std::vector<double> var(static_cast<std::size_t>(d));
  for (Index j = 0; j < d; ++j) {
    const auto col = activations.col(j);
    var[static_cast<std::size_t>(j)] = (col.array() - col.mean()).square().mean();
  }
  std::vector<Index> idx(static_cast<std::size_t>(d));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) {
    return var[static_cast<std::size_t>(a)] > var[static_cast<std::size_t>(b)];
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

Matrix<double> normalize_minmax(const Matrix<double>& column) {
  const double lo = column.minCoeff();
  const double hi = column.maxCoeff();
  if (!(hi > lo)) return Matrix<double>::Constant(column.rows(), column.cols(), 0.5);
  return (column.array() - lo) / (hi - lo);
}

std::vector<Matrix<double>> hidden_activations(Model& model, const Instance& inst,
                                               const ComposerMatrix<float>& composer) {
  const auto w = eval_window(inst, model.config);
  ad::Graph<float> g(ad::GradMode::no_record);
  const auto shared = bind_inr(g, model.inr(), false);
  const auto c = bind_composer(g, composer, false);
  ForwardTrace<float> trace;
  forward(model.config.inr, shared, c, g.constant(model.inr().fourier().encode(grid_for(w)).cast<float>()), &trace);
  std::vector<Matrix<double>> out;
  for (const auto& h : trace.hidden) out.push_back(h.value().cast<double>());
  return out;
}

ActivationMaps activation_maps(Model& model, const Instance& inst, int k) {
  if (inst.modality != Modality::image) throw ConfigError("activation maps need an image-modality model");
  const auto acts = hidden_activations(model, inst, infer_composer(model, inst));
  const Index h = inst.height(), w = inst.width();
  ActivationMaps maps;
  maps.montage = {"montage", Modality::image, {h * static_cast<Index>(acts.size()), w * k},
                  Matrix<double>::Zero(h * static_cast<Index>(acts.size()) * w * k, 1)};
  const Index mw = w * k;
  for (std::size_t l = 0; l < acts.size(); ++l) {
    const auto neurons = top_variance_neurons(acts[l], k);
    std::vector<Instance> imgs;
    for (std::size_t j = 0; j < neurons.size(); ++j) {
      const Matrix<double> v = normalize_minmax(acts[l].col(neurons[j]));
      imgs.push_back({"layer" + std::to_string(l + 1) + "_neuron" + std::to_string(neurons[j]), Modality::image,
                      {h, w}, v});
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
          maps.montage.values((static_cast<Index>(l) * h + y) * mw + static_cast<Index>(j) * w + x, 0) = v(y * w + x, 0);
    }
    maps.neurons.push_back(neurons);
    maps.images.push_back(std::move(imgs));
  }
  return maps;
}

std::vector<std::filesystem::path> write_activation_maps(const ActivationMaps& maps,
                                                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t l = 0; l < maps.images.size(); ++l) {
    for (std::size_t j = 0; j < maps.images[l].size(); ++j) {
      const auto p = dir / ("act_layer" + std::to_string(l + 1) + "_neuron" + std::to_string(maps.neurons[l][j]) + ".png");
      save_png(p, maps.images[l][j]);
      paths.push_back(p);
    }
  }
  const auto p = dir / "act_montage.png";
  save_png(p, maps.montage);
  paths.push_back(p);
  return paths;
}

namespace {

std::vector<Index> top_set(const Eigen::Ref<const Eigen::VectorXd>& v, Index count) {
  std::vector<Index> idx(static_cast<std::size_t>(v.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) { return v(a) > v(b); });
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

double mean_support_iou(const Matrix<double>& a, const Matrix<double>& b, double fraction) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("mean_support_iou: " + shape_string(a.rows(), a.cols()) + " vs " +
                         shape_string(b.rows(), b.cols()));
  const Index count = std::max<Index>(1, static_cast<Index>(std::llround(fraction * static_cast<double>(a.rows()))));
  double total = 0.0;
  for (Index j = 0; j < a.cols(); ++j) {
    const Eigen::VectorXd ca = a.col(j), cb = b.col(j);
    const auto sa = top_set(ca, count), sb = top_set(cb, count);
    std::vector<Index> inter;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
    total += static_cast<double>(inter.size()) / static_cast<double>(2 * count - static_cast<Index>(inter.size()));
  }
  return total / static_cast<double>(a.cols());
}

Instance side_by_side(const Instance& target, const Matrix<double>& reconstruction) {
  if (target.modality != Modality::image) throw ConfigError("side-by-side output needs images");
  if (reconstruction.rows() != target.values.rows() || reconstruction.cols() != target.values.cols())
    throw DimensionError("side_by_side: reconstruction " + shape_string(reconstruction.rows(), reconstruction.cols()) +
                         " vs target " + shape_string(target.values.rows(), target.values.cols()));
  const Index h = target.height(), w = target.width();
  Instance out{target.id, Modality::image, {h, 2 * w}, Matrix<double>(h * 2 * w, target.channels())};
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      out.values.row(y * 2 * w + x) = target.values.row(y * w + x);
      out.values.row(y * 2 * w + w + x) = reconstruction.row(y * w + x).cwiseMax(0.0).cwiseMin(1.0);
    }
  return out;
}

std::string reconstruction_filename(const std::string& id, double psnr_db) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", psnr_db);
  return id + "_psnr" + buf + ".png";
}

}  // namespace cinr
