#pragma once

#include "musekit/tape.hpp"

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

namespace musekit {

// Named parameter bank. Parameters live outside any tape; each training step
// stages them as tape leaves, and gradients accumulate here across the
// per-sample passes of a batch.
template <class T>
class ParamStoreT {
public:
    struct Entry {
        std::string name;
        TensorT<T> value;
        TensorT<T> grad;
        bool decay = false;     // weight decay applies only to flagged entries
        bool frozen = false;    // never staged as differentiable, never stepped
        Var staged;
    };

    int add(const std::string & name, TensorT<T> value, bool decay) {
        require(!index_.count(name), error_kind::contract, "duplicate parameter: " + name);
        Entry e;
        e.name = name;
        e.grad = TensorT<T>::zeros(value.shape);
        e.value = std::move(value);
        e.decay = decay;
        entries_.push_back(std::move(e));
        index_[name] = entries_.size() - 1;
        return (int)(entries_.size() - 1);
    }

    bool has(const std::string & name) const { return index_.count(name) != 0; }

    size_t count() const { return entries_.size(); }
    Entry & entry(size_t i) { return entries_[i]; }
    const Entry & entry(size_t i) const { return entries_[i]; }

    TensorT<T> & value(const std::string & name) { return entries_[find(name)].value; }
    const TensorT<T> & value(const std::string & name) const { return entries_[find(name)].value; }
    const TensorT<T> & grad(const std::string & name) const { return entries_[find(name)].grad; }

    // register all parameters as leaves on a fresh tape; frozen entries and
    // trainable=false staging become constants
    void stage(TapeT<T> & tape, bool trainable = true) {
        for (Entry & e : entries_) e.staged = tape.leaf(e.value, trainable && !e.frozen);
    }

    // freeze every parameter whose name starts with the prefix
    void set_frozen(const std::string & prefix, bool frozen) {
        for (Entry & e : entries_) {
            if (e.name.rfind(prefix, 0) == 0) e.frozen = frozen;
        }
    }

    Var var(const std::string & name) const {
        const Entry & e = entries_[find(name)];
        require(e.staged.valid(), error_kind::graph, "parameter not staged: " + name);
        return e.staged;
    }

    // pull gradients off the tape, accumulating into the store
    void collect(const TapeT<T> & tape) {
        for (Entry & e : entries_) {
            if (!e.staged.valid() || !tape.has_grad(e.staged)) continue;
            const TensorT<T> & g = tape.grad(e.staged);
            for (int64_t i = 0; i < g.size(); ++i) e.grad[i] += g[i];
        }
    }

    void zero_grad() {
        for (Entry & e : entries_) {
            std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
        }
    }

    void scale_grad(double c) {
        for (Entry & e : entries_) {
            for (auto & g : e.grad.data) g = (T)(g * c);
        }
    }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const Entry & e : entries_) n += e.value.size();
        return n;
    }

    double grad_norm() const {
        double s = 0;
        for (const Entry & e : entries_) {
            for (const T & g : e.grad.data) s += (double)g * (double)g;
        }
        return std::sqrt(s);
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;

    size_t find(const std::string & name) const {
        auto it = index_.find(name);
        require(it != index_.end(), error_kind::contract, "unknown parameter: " + name);
        return it->second;
    }
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.96;
    double eps = 1e-8;
    double weight_decay = 0.045;
};

// Decoupled weight decay Adam. Moment state is keyed by parameter order and
// serializes as opt.<name>.m / opt.<name>.v plus opt.step.
template <class T>
class AdamWT {
public:
    explicit AdamWT(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig & config() const { return cfg_; }
    int64_t step_count() const { return step_; }
    void set_step_count(int64_t s) { step_ = s; }

    void step(ParamStoreT<T> & store, double lr) {
        ensure_state(store);
        // a non-finite gradient anywhere rejects the whole update
        for (size_t i = 0; i < store.count(); ++i) {
            const auto & e = store.entry(i);
            if (!e.grad.all_finite()) {
                fail(error_kind::numeric, "non-finite gradient for parameter '" + e.name + "'; update rejected");
            }
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, (double)step_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, (double)step_);
        for (size_t i = 0; i < store.count(); ++i) {
            auto & e = store.entry(i);
            if (e.frozen) {
                for (const T & g : e.grad.data) {
                    require(g == T(0), error_kind::contract,
                            "attempt to update frozen parameter '" + e.name + "'");
                }
                continue;
            }
            TensorT<T> & m = m_[i];
            TensorT<T> & v = v_[i];
            for (int64_t j = 0; j < e.value.size(); ++j) {
                const double g = (double)e.grad[j];
                const double mj = cfg_.beta1 * (double)m[j] + (1.0 - cfg_.beta1) * g;
                const double vj = cfg_.beta2 * (double)v[j] + (1.0 - cfg_.beta2) * g * g;
                m[j] = (T)mj;
                v[j] = (T)vj;
                double upd = (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
                if (e.decay) upd += cfg_.weight_decay * (double)e.value[j];
                e.value[j] = (T)((double)e.value[j] - lr * upd);
            }
        }
    }

    bool has_state() const { return !m_.empty(); }
    TensorT<T> & moment1(size_t i) { return m_[i]; }
    TensorT<T> & moment2(size_t i) { return v_[i]; }

    void ensure_state(const ParamStoreT<T> & store) {
        if (!m_.empty()) {
            require(m_.size() == store.count(), error_kind::contract, "optimizer state size mismatch");
            return;
        }
        m_.reserve(store.count());
        v_.reserve(store.count());
        for (size_t i = 0; i < store.count(); ++i) {
            m_.push_back(TensorT<T>::zeros(store.entry(i).value.shape));
            v_.push_back(TensorT<T>::zeros(store.entry(i).value.shape));
        }
    }

private:
    AdamWConfig cfg_;
    int64_t step_ = 0;
    std::vector<TensorT<T>> m_, v_;
};

// linear warmup to base, then cosine decay to zero at total_steps
inline double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr) {
    require(total_steps > 0 && warmup_steps >= 0, error_kind::config, "cosine_lr: bad step counts");
    require(total_steps > warmup_steps, error_kind::config,
            "cosine_lr: total_steps must exceed warmup_steps");
    require(step >= 0, error_kind::config, "cosine_lr: negative step");
    if (step >= total_steps) return 0.0;
    if (step < warmup_steps) return base_lr * (double)step / (double)warmup_steps;
    const double t = (double)(step - warmup_steps) / (double)(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(kPi * t));
}

using ParamStore = ParamStoreT<float>;
using AdamW = AdamWT<float>;

} // namespace musekit
