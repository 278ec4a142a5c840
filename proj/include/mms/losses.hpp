#pragma once

#include <cstdint>
#include <vector>

#include "mms/tensor.hpp"

namespace mms {

// ---------------------------------------------------------------------------
// Loss-side domain types. All loss math runs in double precision; the float
// network activations are converted at the boundary.
// ---------------------------------------------------------------------------

enum class MaskKind { label, prediction };

// B x 1 x H x W batch of per-pixel values. `label` batches are strictly
// binary; `prediction` batches live in the open interval (0,1).
struct MaskBatch {
    DTensor values;
    MaskKind kind = MaskKind::prediction;

    static MaskBatch label(DTensor t);
    static MaskBatch prediction(DTensor t);
};

// Per-pixel hard-pixel weights, values in [1, 6].
struct WeightMap {
    DTensor values;
};

// B rows of L2-normalized feature vectors (classifier outputs).
struct FeatureVectorBatch {
    int rows = 0;
    int dim = 0;
    std::vector<double> v;  // row-major

    double& at(int r, int d) { return v[static_cast<std::size_t>(r) * dim + d]; }
    const double& at(int r, int d) const { return v[static_cast<std::size_t>(r) * dim + d]; }
};

// B x D x h x w map with every spatial fiber L2-normalized (projector outputs).
struct FeatureMapBatch {
    DTensor values;
};

struct LossWeights {
    double lambda1 = 0.25;
    double lambda2 = 0.25;
    double lambda3 = 0.25;
    double lambda4 = 0.25;
};

struct Temperature {
    double tau = 0.07;
};

// k_neg = kAllNegatives selects every other spatial location as a negative.
constexpr int kAllNegatives = -1;

// Predictions are clamped into [kProbClamp, 1-kProbClamp] before any log.
constexpr double kProbClamp = 1e-6;

// Kernel used for the hard-pixel weight map, shrunk to fit small inputs
// (largest odd value <= min(H, W, 31)).
int effective_weight_kernel(int h, int w);

// ---------------------------------------------------------------------------
// Operations. Each returns the scalar loss; gradient out-parameters are
// optional and, when given, are resized and overwritten.
// ---------------------------------------------------------------------------

// w = 1 + 5 * |boxavg_kernel(y) - y| with edge-replicated borders.
WeightMap weight_map(const MaskBatch& y, int kernel);

// Per image: sum(w * bce) / sum(w); mean over the batch.
double weighted_bce(const MaskBatch& p, const MaskBatch& y, const WeightMap& w,
                    DTensor* grad_p = nullptr);

// Per image: 1 - (inter+1)/(union-inter+1) with inter = sum(w*p*y),
// union = sum(w*(p+y)); mean over the batch.
double weighted_iou(const MaskBatch& p, const MaskBatch& y, const WeightMap& w,
                    DTensor* grad_p = nullptr);

// weighted_iou + weighted_bce under the hard-pixel weight map of y.
double sup_loss(const MaskBatch& p, const MaskBatch& y, DTensor* grad_p = nullptr);

// Symmetrized supervised form over two soft predictions; the target slot of
// each directional term is frozen (passes no gradient), and its weight map is
// computed from the soft target.
double similarity_loss(const MaskBatch& p1, const MaskBatch& p2,
                       DTensor* grad_p1 = nullptr, DTensor* grad_p2 = nullptr);

// All-negative InfoNCE: per query q_j, log(1 + sum_i exp(q_j . k_i / tau)),
// mean over queries. The leading 1 is the exp(0/tau) positive term.
double info_nce_all_negative(const FeatureVectorBatch& q, const FeatureVectorBatch& k,
                             Temperature tau,
                             FeatureVectorBatch* grad_q = nullptr,
                             FeatureVectorBatch* grad_k = nullptr);

// Pixel-wise InfoNCE between two feature maps: same spatial location is the
// positive, k_neg other locations of the opposite map are negatives
// (uniform, without replacement, from rng_seed). Symmetrized over both
// directions.
double pixel_info_nce(const FeatureMapBatch& f1, const FeatureMapBatch& f2,
                      Temperature tau, int k_neg, std::uint64_t rng_seed,
                      FeatureMapBatch* grad_f1 = nullptr,
                      FeatureMapBatch* grad_f2 = nullptr);

// lambda1*l_sup + lambda2*l_nce_sup + lambda3*l_sim + lambda4*l_nce.
// Throws TrainingAbort naming the component if any input is non-finite.
double total_loss(double l_sup, double l_nce_sup, double l_sim, double l_nce,
                  const LossWeights& lw);

}  // namespace mms
