// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cinr/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cinr {

// Indices of the k columns with the largest variance over rows; ties go to
// the lower index.
std::vector<Index> top_variance_neurons(const Matrix<double>& activations, int k);

// Min-max normalization to [0, 1]; a constant column maps to 0.5.
Matrix<double> normalize_minmax(const Matrix<double>& column);

// Post-activation outputs of hidden layers 1..L-1 over the full grid.
std::vector<Matrix<double>> hidden_activations(Model& model, const Instance& inst,
                                               const ComposerMatrix<float>& composer);

struct ActivationMaps {
  std::vector<std::vector<Index>> neurons;     // per layer, selected neuron indices
  std::vector<std::vector<Instance>> images;   // per layer, one grayscale image per neuron
  Instance montage;                            // (L-1) rows x k columns of tiles
};

ActivationMaps activation_maps(Model& model, const Instance& inst, int k);

// Writes act_layer{l}_neuron{j}.png per selected neuron and act_montage.png;
// returns the written paths.
std::vector<std::filesystem::path> write_activation_maps(const ActivationMaps& maps,
                                                         const std::filesystem::path& dir);

// Mean over neurons of the IoU between the sets of coordinates holding the
// top `fraction` activations of that neuron in a and in b.
double mean_support_iou(const Matrix<double>& a, const Matrix<double>& b, double fraction = 0.1);

// Target | reconstruction, side by side.
Instance side_by_side(const Instance& target, const Matrix<double>& reconstruction);

// "{id}_psnr{dd.dd}.png"
std::string reconstruction_filename(const std::string& id, double psnr_db);

}  // namespace cinr
