#pragma once

#include "musekit/optim.hpp"
#include "musekit/tensor.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace musekit {

// Flat named-tensor container persisted as:
//   magic "MUSEKIT1" | u32 version | role string | config snapshot string |
//   tensor table (name, rank, dims, u64 payload offset) | u64 payload bytes |
//   little-endian f32 payload
// Loads are all-or-nothing; any truncation or overlap is a checkpoint error.
struct Checkpoint {
    static constexpr uint32_t kVersion = 1;

    std::string role;
    std::string config_text;

    struct Entry {
        std::string name;
        Tensor tensor;
    };
    std::vector<Entry> entries;

    void add(const std::string & name, Tensor t);
    bool has(const std::string & name) const;
    const Tensor & get(const std::string & name) const;
    Tensor & get_mut(const std::string & name);

    void save(const std::string & path) const;
    static Checkpoint load(const std::string & path);
    static Checkpoint load(const std::string & path, const std::string & expected_role);

private:
    std::unordered_map<std::string, size_t> index_;
};

// Running average over an ordered checkpoint list: start at the first, then
// w <- w + (1-decay)*(w_k - w). decay 0 reproduces the last checkpoint.
Checkpoint ema_average(const std::vector<Checkpoint> & checkpoints, double decay);

// ParamStore <-> Checkpoint bridging. Optimizer state rides along as
// opt.<param>.m / opt.<param>.v plus a step counter tensor.
void store_to_checkpoint(const ParamStore & store, Checkpoint & ckpt);
void checkpoint_to_store(const Checkpoint & ckpt, ParamStore & store);
void optimizer_to_checkpoint(const AdamW & opt, const ParamStore & store, Checkpoint & ckpt,
                             const std::string & step_name = "opt.step");
bool checkpoint_to_optimizer(const Checkpoint & ckpt, const ParamStore & store, AdamW & opt,
                             const std::string & step_name = "opt.step");

} // namespace musekit
