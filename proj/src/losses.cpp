#include "mms/losses.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "mms/errors.hpp"
#include "mms/rng.hpp"

namespace mms {

namespace {

void check_mask_shape(const DTensor& t, const char* where) {
    if (t.n < 1 || t.c != 1 || t.h < 8 || t.w < 8)
        throw ValidationError(std::string(where) + ": mask batch must be Bx1xHxW with H,W >= 8, got " +
                              t.shape_str());
}

double clamp_prob(double p) { return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp); }

// Shared body of weighted_bce/weighted_iou once inputs are validated.
// `target` may be soft; gradient is produced for the prediction slot only.
double bce_core(const DTensor& p, const DTensor& y, const DTensor& w, DTensor* grad_p) {
    const int b = p.n;
    const std::size_t plane = p.plane();
    if (grad_p) *grad_p = DTensor::zeros_like(p);
    double total = 0.0;
    for (int i = 0; i < b; ++i) {
        const std::size_t off = i * plane;
        double wsum = 0.0, num = 0.0;
        for (std::size_t s = 0; s < plane; ++s) wsum += w.v[off + s];
        for (std::size_t s = 0; s < plane; ++s) {
            const double ph = clamp_prob(p.v[off + s]);
            const double t = y.v[off + s];
            num += w.v[off + s] * (-t * std::log(ph) - (1.0 - t) * std::log(1.0 - ph));
        }
        total += num / wsum;
        if (grad_p) {
            for (std::size_t s = 0; s < plane; ++s) {
                const double raw = p.v[off + s];
                if (raw < kProbClamp || raw > 1.0 - kProbClamp) continue;  // clamp kills the slope
                const double t = y.v[off + s];
                grad_p->v[off + s] =
                    w.v[off + s] * (-t / raw + (1.0 - t) / (1.0 - raw)) / (wsum * b);
            }
        }
    }
    return total / b;
}

double iou_core(const DTensor& p, const DTensor& y, const DTensor& w, DTensor* grad_p) {
    const int b = p.n;
    const std::size_t plane = p.plane();
    if (grad_p) *grad_p = DTensor::zeros_like(p);
    double total = 0.0;
    for (int i = 0; i < b; ++i) {
        const std::size_t off = i * plane;
        double inter = 0.0, uni = 0.0;
        for (std::size_t s = 0; s < plane; ++s) {
            inter += w.v[off + s] * p.v[off + s] * y.v[off + s];
            uni += w.v[off + s] * (p.v[off + s] + y.v[off + s]);
        }
        const double num = inter + 1.0;
        const double den = uni - inter + 1.0;
        total += 1.0 - num / den;
        if (grad_p) {
            for (std::size_t s = 0; s < plane; ++s) {
                const double dnum = w.v[off + s] * y.v[off + s];
                const double dden = w.v[off + s] * (1.0 - y.v[off + s]);
                grad_p->v[off + s] = -(dnum * den - num * dden) / (den * den * b);
            }
        }
    }
    return total / b;
}

// Box average with edge-replicated borders, separable passes. Result is
// identical to the direct 2D clamped-window average.
DTensor box_average(const DTensor& y, int kernel) {
    const int half = kernel / 2;
    DTensor tmp = DTensor::zeros_like(y);
    DTensor out = DTensor::zeros_like(y);
    for (int i = 0; i < y.n; ++i) {
        for (int r = 0; r < y.h; ++r)
            for (int c = 0; c < y.w; ++c) {
                double s = 0.0;
                for (int d = -half; d <= half; ++d)
                    s += y.at(i, 0, r, std::clamp(c + d, 0, y.w - 1));
                tmp.at(i, 0, r, c) = s;
            }
        for (int r = 0; r < y.h; ++r)
            for (int c = 0; c < y.w; ++c) {
                double s = 0.0;
                for (int d = -half; d <= half; ++d)
                    s += tmp.at(i, 0, std::clamp(r + d, 0, y.h - 1), c);
                out.at(i, 0, r, c) = s / (static_cast<double>(kernel) * kernel);
            }
    }
    return out;
}

DTensor weight_map_values(const DTensor& target, int kernel) {
    DTensor avg = box_average(target, kernel);
    DTensor w = DTensor::zeros_like(target);
    for (std::size_t s = 0; s < w.size(); ++s)
        w.v[s] = 1.0 + 5.0 * std::abs(avg.v[s] - target.v[s]);
    return w;
}

// Eq.(2) sum evaluated against a (possibly soft) frozen target; weight map
// comes from the target.
double sup_form(const DTensor& p, const DTensor& target, DTensor* grad_p) {
    const int kernel = effective_weight_kernel(p.h, p.w);
    DTensor w = weight_map_values(target, kernel);
    DTensor g_iou, g_bce;
    const double iou = iou_core(p, target, w, grad_p ? &g_iou : nullptr);
    const double bce = bce_core(p, target, w, grad_p ? &g_bce : nullptr);
    if (grad_p) {
        *grad_p = g_iou;
        grad_p->add_scaled(g_bce, 1.0);
    }
    return iou + bce;
}

void check_vec_batch(const FeatureVectorBatch& f, const char* where) {
    if (f.rows < 1 || f.dim < 1 || f.v.size() != static_cast<std::size_t>(f.rows) * f.dim)
        throw ValidationError(std::string(where) + ": malformed feature vector batch");
    for (int r = 0; r < f.rows; ++r) {
        double n2 = 0.0;
        for (int d = 0; d < f.dim; ++d) n2 += f.at(r, d) * f.at(r, d);
        if (!std::isfinite(n2) || std::abs(std::sqrt(n2) - 1.0) > 1e-3)
            throw ValidationError(std::string(where) + ": row " + std::to_string(r) +
                                  " is not unit-normalized");
    }
}

void check_fiber_norms(const DTensor& f, const char* where) {
    const std::size_t plane = f.plane();
    for (int b = 0; b < f.n; ++b)
        for (std::size_t s = 0; s < plane; ++s) {
            double n2 = 0.0;
            for (int d = 0; d < f.c; ++d) {
                const double x = f.v[(static_cast<std::size_t>(b) * f.c + d) * plane + s];
                n2 += x * x;
            }
            if (!std::isfinite(n2) || std::abs(std::sqrt(n2) - 1.0) > 1e-3)
                throw ValidationError(std::string(where) + ": fiber at (" + std::to_string(b) +
                                      "," + std::to_string(s) + ") is not unit-normalized");
        }
}

// Location-major repack: hw rows of D contiguous values, per image.
std::vector<double> fibers_by_location(const DTensor& f, int image) {
    const std::size_t plane = f.plane();
    std::vector<double> out(plane * f.c);
    for (int d = 0; d < f.c; ++d)
        for (std::size_t s = 0; s < plane; ++s)
            out[s * f.c + d] = f.v[(static_cast<std::size_t>(image) * f.c + d) * plane + s];
    return out;
}

void scatter_fiber_grads(DTensor& grad, int image, const std::vector<double>& g_loc) {
    const std::size_t plane = grad.plane();
    for (int d = 0; d < grad.c; ++d)
        for (std::size_t s = 0; s < plane; ++s)
            grad.v[(static_cast<std::size_t>(image) * grad.c + d) * plane + s] += g_loc[s * grad.c + d];
}

// One direction of the pixel-wise InfoNCE. Adds gradients into g_q / g_k
// (location-major, same layout as the packed fibers); `scale` carries the
// 1/(2*B*hw) symmetrization and averaging factor.
double pixel_nce_direction(const std::vector<double>& q, const std::vector<double>& k, int hw,
                           int dim, double tau, int k_neg, std::uint64_t seed, double scale,
                           std::vector<double>* g_q, std::vector<double>* g_k) {
    const bool all = (k_neg == kAllNegatives) || (k_neg == hw - 1);
    double sum = 0.0;
    std::vector<int> negs;
    std::vector<double> logits;
    std::vector<double> probs;
    for (int s = 0; s < hw; ++s) {
        negs.clear();
        if (all) {
            for (int t = 0; t < hw; ++t)
                if (t != s) negs.push_back(t);
        } else {
            // Floyd's sampler over hw-1 candidates, remapped to skip s.
            auto rng = make_rng(mix_seed({seed, static_cast<std::uint64_t>(s)}));
            const int m = hw - 1;
            std::unordered_set<int> chosen;
            for (int i = m - k_neg; i < m; ++i) {
                const int t = uniform_int(rng, 0, i);
                chosen.insert(chosen.count(t) ? i : t);
            }
            for (int t : chosen) negs.push_back(t >= s ? t + 1 : t);
        }
        const double* qs = &q[static_cast<std::size_t>(s) * dim];
        const int kcount = static_cast<int>(negs.size());
        logits.assign(kcount + 1, 0.0);
        {
            const double* ks = &k[static_cast<std::size_t>(s) * dim];
            double dot = 0.0;
            for (int d = 0; d < dim; ++d) dot += qs[d] * ks[d];
            logits[0] = dot / tau;
        }
        for (int j = 0; j < kcount; ++j) {
            const double* kj = &k[static_cast<std::size_t>(negs[j]) * dim];
            double dot = 0.0;
            for (int d = 0; d < dim; ++d) dot += qs[d] * kj[d];
            logits[j + 1] = dot / tau;
        }
        const double m = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (double l : logits) z += std::exp(l - m);
        sum += std::log(z) + m - logits[0];
        if (g_q) {
            probs.resize(logits.size());
            for (std::size_t j = 0; j < logits.size(); ++j) probs[j] = std::exp(logits[j] - m) / z;
            double* gq = &(*g_q)[static_cast<std::size_t>(s) * dim];
            for (std::size_t j = 0; j < logits.size(); ++j) {
                const double coef = scale * (probs[j] - (j == 0 ? 1.0 : 0.0)) / tau;
                const int t = (j == 0) ? s : negs[j - 1];
                const double* kt = &k[static_cast<std::size_t>(t) * dim];
                double* gk = &(*g_k)[static_cast<std::size_t>(t) * dim];
                for (int d = 0; d < dim; ++d) {
                    gq[d] += coef * kt[d];
                    gk[d] += coef * qs[d];
                }
            }
        }
    }
    return sum;
}

}  // namespace

MaskBatch MaskBatch::label(DTensor t) {
    check_mask_shape(t, "MaskBatch::label");
    for (double x : t.v)
        if (x != 0.0 && x != 1.0)
            throw ValidationError("MaskBatch::label: mask value not in {0,1}");
    return MaskBatch{std::move(t), MaskKind::label};
}

MaskBatch MaskBatch::prediction(DTensor t) {
    check_mask_shape(t, "MaskBatch::prediction");
    for (double x : t.v)
        if (!(x > 0.0 && x < 1.0))
            throw ValidationError("MaskBatch::prediction: value outside (0,1)");
    return MaskBatch{std::move(t), MaskKind::prediction};
}

int effective_weight_kernel(int h, int w) {
    int k = std::min({31, h, w});
    if (k % 2 == 0) --k;
    return k;
}

WeightMap weight_map(const MaskBatch& y, int kernel) {
    if (kernel < 1 || kernel % 2 == 0)
        throw ParameterError("weight_map: kernel must be odd and positive");
    if (kernel > std::min(y.values.h, y.values.w))
        throw ParameterError("weight_map: kernel exceeds mask extent");
    if (y.kind != MaskKind::label)
        throw ValidationError("weight_map: mask must be a binary label batch");
    for (double x : y.values.v)
        if (x != 0.0 && x != 1.0)
            throw ValidationError("weight_map: mask value not in {0,1}");
    return WeightMap{weight_map_values(y.values, kernel)};
}

double weighted_bce(const MaskBatch& p, const MaskBatch& y, const WeightMap& w, DTensor* grad_p) {
    require_same_shape(p.values, y.values, "weighted_bce");
    require_same_shape(p.values, w.values, "weighted_bce");
    require_finite(p.values, "weighted_bce");
    require_finite(y.values, "weighted_bce");
    require_finite(w.values, "weighted_bce");
    return bce_core(p.values, y.values, w.values, grad_p);
}

double weighted_iou(const MaskBatch& p, const MaskBatch& y, const WeightMap& w, DTensor* grad_p) {
    require_same_shape(p.values, y.values, "weighted_iou");
    require_same_shape(p.values, w.values, "weighted_iou");
    require_finite(p.values, "weighted_iou");
    require_finite(y.values, "weighted_iou");
    return iou_core(p.values, y.values, w.values, grad_p);
}

double sup_loss(const MaskBatch& p, const MaskBatch& y, DTensor* grad_p) {
    require_same_shape(p.values, y.values, "sup_loss");
    if (y.kind != MaskKind::label) throw ValidationError("sup_loss: target must be a label batch");
    require_finite(p.values, "sup_loss");
    return sup_form(p.values, y.values, grad_p);
}

double similarity_loss(const MaskBatch& p1, const MaskBatch& p2, DTensor* grad_p1,
                       DTensor* grad_p2) {
    require_same_shape(p1.values, p2.values, "similarity_loss");
    require_finite(p1.values, "similarity_loss");
    require_finite(p2.values, "similarity_loss");
    const double d12 = sup_form(p1.values, p2.values, grad_p1);
    const double d21 = sup_form(p2.values, p1.values, grad_p2);
    if (grad_p1)
        for (double& g : grad_p1->v) g *= 0.5;
    if (grad_p2)
        for (double& g : grad_p2->v) g *= 0.5;
    return 0.5 * (d12 + d21);
}

double info_nce_all_negative(const FeatureVectorBatch& q, const FeatureVectorBatch& k,
                             Temperature tau, FeatureVectorBatch* grad_q,
                             FeatureVectorBatch* grad_k) {
    if (k.rows < 1) throw ParameterError("info_nce_all_negative: need at least one key");
    if (q.dim != k.dim) throw ValidationError("info_nce_all_negative: query/key dim mismatch");
    check_vec_batch(q, "info_nce_all_negative");
    check_vec_batch(k, "info_nce_all_negative");
    if ((grad_q == nullptr) != (grad_k == nullptr))
        throw ParameterError("info_nce_all_negative: pass both gradient slots or neither");
    if (grad_q) *grad_q = FeatureVectorBatch{q.rows, q.dim, std::vector<double>(q.v.size(), 0.0)};
    if (grad_k) *grad_k = FeatureVectorBatch{k.rows, k.dim, std::vector<double>(k.v.size(), 0.0)};

    double total = 0.0;
    std::vector<double> logits(k.rows);
    for (int j = 0; j < q.rows; ++j) {
        double mx = 0.0;  // the implicit positive logit exp(0/tau)
        for (int i = 0; i < k.rows; ++i) {
            double dot = 0.0;
            for (int d = 0; d < q.dim; ++d) dot += q.at(j, d) * k.at(i, d);
            logits[i] = dot / tau.tau;
            mx = std::max(mx, logits[i]);
        }
        double z = std::exp(-mx);  // the leading 1
        for (int i = 0; i < k.rows; ++i) z += std::exp(logits[i] - mx);
        total += std::log(z) + mx;
        if (grad_q) {
            for (int i = 0; i < k.rows; ++i) {
                const double coef = std::exp(logits[i] - mx) / z / (tau.tau * q.rows);
                for (int d = 0; d < q.dim; ++d) {
                    grad_q->at(j, d) += coef * k.at(i, d);
                    grad_k->at(i, d) += coef * q.at(j, d);
                }
            }
        }
    }
    return total / q.rows;
}

double pixel_info_nce(const FeatureMapBatch& f1, const FeatureMapBatch& f2, Temperature tau,
                      int k_neg, std::uint64_t rng_seed, FeatureMapBatch* grad_f1,
                      FeatureMapBatch* grad_f2) {
    require_same_shape(f1.values, f2.values, "pixel_info_nce");
    const int hw = static_cast<int>(f1.values.plane());
    if (k_neg != kAllNegatives && (k_neg < 1 || k_neg >= hw))
        throw ParameterError("pixel_info_nce: k_neg must be in [1, h*w-1] or ALL");
    check_fiber_norms(f1.values, "pixel_info_nce");
    check_fiber_norms(f2.values, "pixel_info_nce");

    const int b = f1.values.n;
    const int dim = f1.values.c;
    const double scale = 1.0 / (2.0 * b * hw);
    if ((grad_f1 == nullptr) != (grad_f2 == nullptr))
        throw ParameterError("pixel_info_nce: pass both gradient slots or neither");
    if (grad_f1) {
        grad_f1->values = DTensor::zeros_like(f1.values);
        grad_f2->values = DTensor::zeros_like(f2.values);
    }

    double total = 0.0;
    for (int i = 0; i < b; ++i) {
        const std::vector<double> a = fibers_by_location(f1.values, i);
        const std::vector<double> c = fibers_by_location(f2.values, i);
        std::vector<double> ga(a.size(), 0.0), gc(c.size(), 0.0);
        const std::uint64_t s12 = mix_seed({rng_seed, 0x12, static_cast<std::uint64_t>(i)});
        const std::uint64_t s21 = mix_seed({rng_seed, 0x21, static_cast<std::uint64_t>(i)});
        total += pixel_nce_direction(a, c, hw, dim, tau.tau, k_neg, s12, scale,
                                     grad_f1 ? &ga : nullptr, grad_f1 ? &gc : nullptr);
        total += pixel_nce_direction(c, a, hw, dim, tau.tau, k_neg, s21, scale,
                                     grad_f1 ? &gc : nullptr, grad_f1 ? &ga : nullptr);
        if (grad_f1) {
            scatter_fiber_grads(grad_f1->values, i, ga);
            scatter_fiber_grads(grad_f2->values, i, gc);
        }
    }
    return total * scale;
}

double total_loss(double l_sup, double l_nce_sup, double l_sim, double l_nce,
                  const LossWeights& lw) {
    const char* names[] = {"l_sup", "l_nce_sup", "l_sim", "l_nce"};
    const double vals[] = {l_sup, l_nce_sup, l_sim, l_nce};
    for (int i = 0; i < 4; ++i)
        if (!std::isfinite(vals[i]))
            throw TrainingAbort(names[i], std::string("total_loss: non-finite component ") + names[i]);
    return lw.lambda1 * l_sup + lw.lambda2 * l_nce_sup + lw.lambda3 * l_sim + lw.lambda4 * l_nce;
}

}  // namespace mms
