#include "musekit/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace musekit {

namespace {

const char kMagic[8] = {'M', 'U', 'S', 'E', 'K', 'I', 'T', '1'};

void write_u32(std::ostream & os, uint32_t v) { os.write(reinterpret_cast<const char *>(&v), 4); }
void write_u64(std::ostream & os, uint64_t v) { os.write(reinterpret_cast<const char *>(&v), 8); }

void write_str(std::ostream & os, const std::string & s) {
    write_u32(os, (uint32_t)s.size());
    os.write(s.data(), (std::streamsize)s.size());
}

struct Reader {
    const std::string & buf;
    size_t pos = 0;

    void need(size_t n, const char * what) {
        if (pos + n > buf.size()) {
            fail(error_kind::checkpoint,
                 std::string("truncated checkpoint while reading ") + what + " at byte " + std::to_string(pos));
        }
    }
    uint32_t u32(const char * what) {
        need(4, what);
        uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    uint64_t u64(const char * what) {
        need(8, what);
        uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::string str(const char * what) {
        const uint32_t n = u32(what);
        need(n, what);
        std::string s(buf.data() + pos, n);
        pos += n;
        return s;
    }
};

} // namespace

void Checkpoint::add(const std::string & name, Tensor t) {
    require(!index_.count(name), error_kind::checkpoint, "duplicate tensor name: " + name);
    index_[name] = entries.size();
    entries.push_back({name, std::move(t)});
}

bool Checkpoint::has(const std::string & name) const { return index_.count(name) != 0; }

const Tensor & Checkpoint::get(const std::string & name) const {
    auto it = index_.find(name);
    require(it != index_.end(), error_kind::checkpoint, "missing tensor: " + name);
    return entries[it->second].tensor;
}

Tensor & Checkpoint::get_mut(const std::string & name) {
    auto it = index_.find(name);
    require(it != index_.end(), error_kind::checkpoint, "missing tensor: " + name);
    return entries[it->second].tensor;
}

void Checkpoint::save(const std::string & path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), error_kind::io, "cannot open for write: " + path);
    os.write(kMagic, 8);
    write_u32(os, kVersion);
    write_str(os, role);
    write_str(os, config_text);
    write_u32(os, (uint32_t)entries.size());
    uint64_t offset = 0;
    for (const Entry & e : entries) {
        write_str(os, e.name);
        write_u32(os, (uint32_t)e.tensor.rank());
        for (int d = 0; d < e.tensor.rank(); ++d) write_u32(os, (uint32_t)e.tensor.dim(d));
        write_u64(os, offset);
        offset += (uint64_t)e.tensor.size() * 4;
    }
    write_u64(os, offset);
    for (const Entry & e : entries) {
        os.write(reinterpret_cast<const char *>(e.tensor.data.data()),
                 (std::streamsize)(e.tensor.size() * 4));
    }
    os.flush();
    require(os.good(), error_kind::io, "write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string & path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), error_kind::checkpoint, "cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Reader r{buf};

    r.need(8, "magic");
    require(std::memcmp(buf.data(), kMagic, 8) == 0, error_kind::checkpoint, "bad magic in " + path);
    r.pos = 8;
    const uint32_t version = r.u32("version");
    require(version == kVersion, error_kind::checkpoint,
            "unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.role = r.str("role");
    ckpt.config_text = r.str("config snapshot");
    const uint32_t n = r.u32("tensor count");

    struct Meta {
        std::string name;
        std::vector<int> dims;
        uint64_t offset;
        uint64_t bytes;
    };
    std::vector<Meta> metas;
    metas.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        Meta m;
        m.name = r.str("tensor name");
        const uint32_t rank = r.u32("tensor rank");
        require(rank <= 8, error_kind::checkpoint, "implausible tensor rank for " + m.name);
        int64_t count = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            const uint32_t dim = r.u32("tensor dim");
            m.dims.push_back((int)dim);
            count *= (int64_t)dim;
        }
        m.offset = r.u64("tensor offset");
        m.bytes = (uint64_t)count * 4;
        metas.push_back(std::move(m));
    }
    const uint64_t payload_len = r.u64("payload length");
    r.need(payload_len, "payload");
    const size_t payload_pos = r.pos;

    uint64_t total = 0, expect = 0;
    for (const Meta & m : metas) {
        require(m.offset == expect, error_kind::checkpoint,
                "overlapping or out-of-order tensor offsets at " + m.name);
        require(m.offset + m.bytes <= payload_len, error_kind::checkpoint,
                "tensor " + m.name + " exceeds payload");
        expect = m.offset + m.bytes;
        total += m.bytes;
    }
    require(total == payload_len, error_kind::checkpoint, "payload length does not match tensor table");

    for (const Meta & m : metas) {
        Tensor t = Tensor::zeros(m.dims.empty() ? std::vector<int>{1} : m.dims);
        if (m.dims.empty()) t.shape = {};    // rank-0 scalars round-trip as-is
        std::memcpy(t.data.data(), buf.data() + payload_pos + m.offset, m.bytes);
        ckpt.add(m.name, std::move(t));
    }
    return ckpt;
}

Checkpoint Checkpoint::load(const std::string & path, const std::string & expected_role) {
    Checkpoint c = load(path);
    require(c.role == expected_role, error_kind::checkpoint,
            "role mismatch for " + path + ": have '" + c.role + "', need '" + expected_role + "'");
    return c;
}

Checkpoint ema_average(const std::vector<Checkpoint> & checkpoints, double decay) {
    require(!checkpoints.empty(), error_kind::checkpoint, "ema_average: no checkpoints");
    require(decay >= 0.0 && decay < 1.0, error_kind::config, "ema_average: decay must be in [0,1)");
    Checkpoint out = checkpoints.front();
    for (size_t k = 1; k < checkpoints.size(); ++k) {
        const Checkpoint & c = checkpoints[k];
        require(c.entries.size() == out.entries.size(), error_kind::checkpoint,
                "ema_average: tensor count mismatch at checkpoint " + std::to_string(k));
        for (size_t i = 0; i < out.entries.size(); ++i) {
            Tensor & w = out.entries[i].tensor;
            require(c.entries[i].name == out.entries[i].name, error_kind::checkpoint,
                    "ema_average: tensor name mismatch: " + c.entries[i].name);
            const Tensor & wk = c.entries[i].tensor;
            require(w.same_shape(wk), error_kind::checkpoint,
                    "ema_average: shape mismatch for " + out.entries[i].name);
            // delta form keeps identical inputs bitwise fixed points
            for (int64_t j = 0; j < w.size(); ++j) {
                w[j] = (float)((double)w[j] + (1.0 - decay) * ((double)wk[j] - (double)w[j]));
            }
        }
    }
    return out;
}

void store_to_checkpoint(const ParamStore & store, Checkpoint & ckpt) {
    for (size_t i = 0; i < store.count(); ++i) {
        const auto & e = store.entry(i);
        ckpt.add(e.name, e.value);
    }
}

void checkpoint_to_store(const Checkpoint & ckpt, ParamStore & store) {
    for (size_t i = 0; i < store.count(); ++i) {
        auto & e = store.entry(i);
        const Tensor & t = ckpt.get(e.name);
        require(t.same_shape(e.value), error_kind::checkpoint,
                "shape mismatch loading parameter " + e.name + ": checkpoint " + shape_str(t) +
                    " vs model " + shape_str(e.value));
        e.value = t;
    }
}

void optimizer_to_checkpoint(const AdamW & opt, const ParamStore & store, Checkpoint & ckpt,
                             const std::string & step_name) {
    if (!const_cast<AdamW &>(opt).has_state()) return;
    AdamW & o = const_cast<AdamW &>(opt);
    for (size_t i = 0; i < store.count(); ++i) {
        ckpt.add("opt." + store.entry(i).name + ".m", o.moment1(i));
        ckpt.add("opt." + store.entry(i).name + ".v", o.moment2(i));
    }
    ckpt.add(step_name, Tensor::from({1}, {(float)opt.step_count()}));
}

bool checkpoint_to_optimizer(const Checkpoint & ckpt, const ParamStore & store, AdamW & opt,
                             const std::string & step_name) {
    if (!ckpt.has(step_name)) return false;
    opt.ensure_state(store);
    for (size_t i = 0; i < store.count(); ++i) {
        const std::string & n = store.entry(i).name;
        opt.moment1(i) = ckpt.get("opt." + n + ".m");
        opt.moment2(i) = ckpt.get("opt." + n + ".v");
    }
    opt.set_step_count((int64_t)ckpt.get(step_name)[0]);
    return true;
}

} // namespace musekit
