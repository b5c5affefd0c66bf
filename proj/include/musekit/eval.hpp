#pragma once

#include "musekit/perceptual.hpp"
#include "musekit/shapes.hpp"

#include <string>
#include <vector>

namespace musekit {

struct FeatureStats {
    DTensor mean;          // [d]
    DTensor cov;           // [d, d], unbiased
    int64_t count = 0;

    int dim() const { return mean.size() ? (int)mean.dim(0) : 0; }
};

// accumulate stats over feature vectors; needs >= 65 samples (one more than
// the 64-dim feature space so the unbiased covariance is well-defined)
FeatureStats feature_stats_from_vectors(const std::vector<std::vector<double>> & feats);

// global-average-pooled features from the frozen perceptual net
FeatureStats feature_stats(const std::vector<SceneImage> & images, PerceptualNet & net);

// cyclic Jacobi eigendecomposition of a symmetric matrix: A = V diag(w) V^T
void symmetric_eigh(const DTensor & a, DTensor & eigvals, DTensor & eigvecs);

// principal square root of a PSD matrix (negative eigenvalues clamped to 0);
// off-symmetry or eigenvalues below -tol raise a numeric error
DTensor sqrtm_psd(const DTensor & a, double tol = 1e-6);

// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))
double frechet_distance(const FeatureStats & a, const FeatureStats & b);

struct AlignmentSummary {
    double overall = 0;
    double count_rate = 0, color_rate = 0, shape_rate = 0, relation_rate = 0;
    int64_t trials = 0;
    int64_t hits = 0;
    std::vector<std::string> captions;
    std::vector<double> per_caption;    // overall rate per caption
};

AlignmentSummary alignment_from_verifications(
    const std::vector<std::string> & captions,
    const std::vector<std::vector<AlignmentReport>> & results);

// pooled two-proportion z statistic for hit counts over equal-sized arms
double two_proportion_z(int64_t hits_a, int64_t n_a, int64_t hits_b, int64_t n_b);

struct BenchRecord {
    std::string method;
    int64_t forwards = 0;
    int64_t tokens = 0;
    double seconds = 0;
    uint64_t seed = 0;
};

// header + RFC-4180 quoting; cell quoting only when needed
void write_csv(const std::string & path, const std::vector<std::string> & header,
               const std::vector<std::vector<std::string>> & rows);
std::string csv_quote(const std::string & cell);

} // namespace musekit
