#include "musekit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace musekit {

FeatureStats feature_stats_from_vectors(const std::vector<std::vector<double>> & feats) {
    require(feats.size() >= 65, error_kind::stat,
            "need >=65 samples for feature stats, got " + std::to_string(feats.size()));
    const int d = (int)feats[0].size();
    for (const auto & f : feats) {
        require((int)f.size() == d, error_kind::shape, "feature dim mismatch");
    }
    FeatureStats st;
    st.count = (int64_t)feats.size();
    st.mean = DTensor::zeros({d});
    for (const auto & f : feats) {
        for (int i = 0; i < d; ++i) st.mean[i] += f[(size_t)i];
    }
    for (int i = 0; i < d; ++i) st.mean[i] /= (double)st.count;
    st.cov = DTensor::zeros({d, d});
    for (const auto & f : feats) {
        for (int i = 0; i < d; ++i) {
            const double di = f[(size_t)i] - st.mean[i];
            for (int j = 0; j < d; ++j) {
                st.cov.at2(i, j) += di * (f[(size_t)j] - st.mean[j]);
            }
        }
    }
    const double denom = (double)(st.count - 1);
    for (int64_t i = 0; i < st.cov.size(); ++i) st.cov[i] /= denom;
    return st;
}

FeatureStats feature_stats(const std::vector<SceneImage> & images, PerceptualNet & net) {
    require(!images.empty(), error_kind::stat, "no images");
    const int w = images[0].width, h = images[0].height;
    std::vector<std::vector<double>> feats;
    feats.reserve(images.size());
    for (const auto & img : images) {
        require(img.width == w && img.height == h, error_kind::shape,
                "feature_stats: images must share one resolution");
        feats.push_back(net.feature_vec(image_to_tensor(img)));
    }
    return feature_stats_from_vectors(feats);
}

// cyclic Jacobi sweeps; good enough for 64x64 symmetric matrices
void symmetric_eigh(const DTensor & a, DTensor & eigvals, DTensor & eigvecs) {
    require(a.rank() == 2 && a.rows() == a.cols(), error_kind::shape, "eigh wants a square matrix");
    const int n = a.rows();
    DTensor m = a;
    eigvecs = DTensor::zeros({n, n});
    for (int i = 0; i < n; ++i) eigvecs.at2(i, i) = 1.0;

    auto off_norm = [&]() {
        double s = 0;
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) s += m.at2(i, j) * m.at2(i, j);
        }
        return std::sqrt(2.0 * s);
    };

    const int max_sweeps = 64;
    for (int sweep = 0; sweep < max_sweeps && off_norm() > 1e-12; ++sweep) {
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = m.at2(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = m.at2(p, p), aqq = m.at2(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double mkp = m.at2(k, p), mkq = m.at2(k, q);
                    m.at2(k, p) = c * mkp - s * mkq;
                    m.at2(k, q) = s * mkp + c * mkq;
                }
                for (int k = 0; k < n; ++k) {
                    const double mpk = m.at2(p, k), mqk = m.at2(q, k);
                    m.at2(p, k) = c * mpk - s * mqk;
                    m.at2(q, k) = s * mpk + c * mqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = eigvecs.at2(k, p), vkq = eigvecs.at2(k, q);
                    eigvecs.at2(k, p) = c * vkp - s * vkq;
                    eigvecs.at2(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    eigvals = DTensor::zeros({n});
    for (int i = 0; i < n; ++i) eigvals[i] = m.at2(i, i);
}

namespace {

DTensor matmul_sq(const DTensor & a, const DTensor & b) {
    const int n = a.rows();
    DTensor out = DTensor::zeros({n, n});
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < n; ++k) {
            const double aik = a.at2(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < n; ++j) out.at2(i, j) += aik * b.at2(k, j);
        }
    }
    return out;
}

} // namespace

DTensor sqrtm_psd(const DTensor & a, double tol) {
    require(a.rank() == 2 && a.rows() == a.cols(), error_kind::shape, "sqrtm wants a square matrix");
    const int n = a.rows();
    double asym = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) asym = std::max(asym, std::abs(a.at2(i, j) - a.at2(j, i)));
    }
    require(asym <= tol, error_kind::numeric, "sqrtm: matrix not symmetric within tolerance");
    DTensor w, v;
    symmetric_eigh(a, w, v);
    for (int i = 0; i < n; ++i) {
        require(w[i] >= -tol, error_kind::numeric,
                "sqrtm: eigenvalue " + std::to_string(w[i]) + " below -tolerance; matrix not PSD");
        w[i] = std::sqrt(std::max(0.0, w[i]));
    }
    DTensor out = DTensor::zeros({n, n});
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < n; ++k) {
            const double vw = v.at2(i, k) * w[k];
            if (vw == 0.0) continue;
            for (int j = 0; j < n; ++j) out.at2(i, j) += vw * v.at2(j, k);
        }
    }
    return out;
}

double frechet_distance(const FeatureStats & a, const FeatureStats & b) {
    require(a.dim() == b.dim() && a.dim() > 0, error_kind::shape, "frechet: dim mismatch");
    require(a.count >= 65 && b.count >= 65, error_kind::stat, "frechet: need >=65 samples per side");
    // identical stats are exactly zero; the iterative root below only gets
    // within machine epsilon of it
    if (a.mean.data == b.mean.data && a.cov.data == b.cov.data) return 0.0;
    const int n = a.dim();
    double mean_term = 0;
    for (int i = 0; i < n; ++i) {
        const double d = a.mean[i] - b.mean[i];
        mean_term += d * d;
    }
    // Tr((Sa Sb)^{1/2}) via the symmetric form Tr(sqrt(sqrt(Sa) Sb sqrt(Sa)))
    DTensor ra = sqrtm_psd(a.cov);
    DTensor inner = matmul_sq(matmul_sq(ra, b.cov), ra);
    // symmetrize away roundoff before the second root
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double s = 0.5 * (inner.at2(i, j) + inner.at2(j, i));
            inner.at2(i, j) = s;
            inner.at2(j, i) = s;
        }
    }
    DTensor w, v;
    symmetric_eigh(inner, w, v);
    double tr_sqrt = 0;
    for (int i = 0; i < n; ++i) tr_sqrt += std::sqrt(std::max(0.0, w[i]));
    double tr_ab = 0;
    for (int i = 0; i < n; ++i) tr_ab += a.cov.at2(i, i) + b.cov.at2(i, i);
    const double d = mean_term + tr_ab - 2.0 * tr_sqrt;
    return std::max(0.0, d);    // clamp roundoff on identical stats
}

AlignmentSummary alignment_from_verifications(
    const std::vector<std::string> & captions,
    const std::vector<std::vector<AlignmentReport>> & results) {
    require(captions.size() == results.size(), error_kind::contract,
            "alignment: captions/results size mismatch");
    AlignmentSummary s;
    s.captions = captions;
    int64_t count_ok = 0, color_ok = 0, shape_ok = 0;
    int64_t rel_ok = 0, rel_total = 0;
    for (const auto & caption_results : results) {
        int64_t caption_hits = 0;
        for (const AlignmentReport & r : caption_results) {
            ++s.trials;
            if (r.overall) {
                ++s.hits;
                ++caption_hits;
            }
            bool all_count = true, all_color = true, all_shape = true;
            for (const GroupReport & g : r.groups) {
                all_count = all_count && g.count_ok;
                all_color = all_color && g.color_ok;
                all_shape = all_shape && g.shape_ok;
            }
            count_ok += all_count ? 1 : 0;
            color_ok += all_color ? 1 : 0;
            shape_ok += all_shape ? 1 : 0;
            if (r.relation_ok.has_value()) {
                ++rel_total;
                rel_ok += *r.relation_ok ? 1 : 0;
            }
        }
        s.per_caption.push_back(caption_results.empty()
                                    ? 0.0
                                    : (double)caption_hits / (double)caption_results.size());
    }
    if (s.trials > 0) {
        s.overall = (double)s.hits / (double)s.trials;
        s.count_rate = (double)count_ok / (double)s.trials;
        s.color_rate = (double)color_ok / (double)s.trials;
        s.shape_rate = (double)shape_ok / (double)s.trials;
    }
    s.relation_rate = rel_total > 0 ? (double)rel_ok / (double)rel_total : 0.0;
    return s;
}

double two_proportion_z(int64_t hits_a, int64_t n_a, int64_t hits_b, int64_t n_b) {
    require(n_a > 0 && n_b > 0, error_kind::stat, "two_proportion_z: empty arm");
    require(hits_a >= 0 && hits_a <= n_a && hits_b >= 0 && hits_b <= n_b, error_kind::stat,
            "two_proportion_z: hits outside [0,n]");
    const double pa = (double)hits_a / (double)n_a;
    const double pb = (double)hits_b / (double)n_b;
    const double pooled = (double)(hits_a + hits_b) / (double)(n_a + n_b);
    const double se = std::sqrt(pooled * (1.0 - pooled) * (1.0 / (double)n_a + 1.0 / (double)n_b));
    if (se == 0.0) return 0.0;    // both arms all-hit or all-miss
    return (pa - pb) / se;
}

std::string csv_quote(const std::string & cell) {
    if (cell.find_first_of(",\"\n\r") == std::string::npos) return cell;
    std::string out = "\"";
    for (char c : cell) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

void write_csv(const std::string & path, const std::vector<std::string> & header,
               const std::vector<std::vector<std::string>> & rows) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), error_kind::io, "cannot open for write: " + path);
    auto emit = [&](const std::vector<std::string> & row) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) f << ',';
            f << csv_quote(row[i]);
        }
        f << '\n';
    };
    emit(header);
    for (const auto & row : rows) {
        require(row.size() == header.size(), error_kind::contract, "csv row width mismatch");
        emit(row);
    }
    require(f.good(), error_kind::io, "write failed: " + path);
}

} // namespace musekit
