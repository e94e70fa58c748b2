#pragma once

#include <bit>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "lhunet/blocks.hpp"
#include "lhunet/plan.hpp"

namespace lhunet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

template <class T>
struct TConv3dLayer {
    VarId w = -1, b = -1;
    Triple stride{1, 1, 1};

    static TConv3dLayer build(ParamStore<T>& ps, Rng& rng, const std::string& name, int ci,
                              int co, Axis3 k) {
        TConv3dLayer m;
        m.stride = Triple{k[0], k[1], k[2]};
        int64_t fan = (int64_t)ci * k[0] * k[1] * k[2];
        m.w = ps.add_param(name + ".w", init::he_normal<T>(rng, {ci, co, k[0], k[1], k[2]}, fan));
        m.b = ps.add_param(name + ".b", init::constant<T>({co}, 0.0));
        return m;
    }

    VarId fwd(Graph<T>& g, VarId x) const {
        return ops::tconv3d(g, x, w, b, stride, Triple{0, 0, 0});
    }
};

template <class T>
struct StageBlock {
    BlockKind kind = BlockKind::Res;
    ResBlock<T> res;
    HybridBlock<T> hyb;

    static StageBlock build(ParamStore<T>& ps, Rng& rng, const std::string& name,
                            const StagePlan& sp, const ArchSpec& a) {
        StageBlock m;
        m.kind = sp.kind;
        if (sp.kind == BlockKind::Res)
            m.res = ResBlock<T>::build(ps, rng, name, sp.width);
        else
            m.hyb = HybridBlock<T>::build(ps, rng, name, sp.width, sp.vit, sp.cnn, sp.n_tokens,
                                          sp.p_eff, sp.heads, a.lka_kernels, a.deform_kernel);
        return m;
    }

    VarId fwd(Graph<T>& g, VarId x, bool training) const {
        return kind == BlockKind::Res ? res.fwd(g, x, training) : hyb.fwd(g, x, training);
    }
};

template <class T>
class Network {
  public:
    explicit Network(const ArchSpec& arch, uint64_t seed = 0)
        : plan_(build_plan(arch)), ps_(g_) {
        Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
        const ArchSpec& a = plan_.arch;
        stem_ = Stem<T>::build(ps_, rng, "stem", a.in_channels, a.stage_widths[0]);
        for (const StagePlan& sp : plan_.encoder) {
            EncStage st;
            st.trans = Conv3dLayer<T>::build(ps_, rng, sp.name + ".trans", sp.trans_in, sp.width, 1);
            st.block = StageBlock<T>::build(ps_, rng, sp.name + ".block", sp, a);
            enc_.push_back(std::move(st));
        }
        for (const StagePlan& sp : plan_.decoder) {
            DecStage st;
            int c_skip = sp.width;
            st.up = TConv3dLayer<T>::build(ps_, rng, sp.name + ".up", sp.up_in, c_skip, sp.up_k);
            st.merge = Conv3dLayer<T>::build(ps_, rng, sp.name + ".merge", 2 * c_skip, c_skip, 1);
            st.block = StageBlock<T>::build(ps_, rng, sp.name + ".block", sp, a);
            dec_.push_back(std::move(st));
        }
        head_ = Head<T>::build(ps_, rng, "head", a.stage_widths[0], a.out_channels);
        base_mark_ = g_.mark();
    }

    // Runs the net on a (B, in_channels, D, H, W) leaf already in the graph.
    // Outside of grad mode, consumed intermediates are released as soon as
    // possible so full inference fits in memory.
    VarId forward(VarId x, bool training) {
        const bool thrifty = !g_.grad_enabled();
        const int S = (int)plan_.encoder.size();
        std::vector<VarId> skips;
        std::set<VarId> live{x};

        size_t start = g_.size();
        VarId cur;
        {
            ScopeGuard<T> sc(g_, "stem");
            cur = stem_.fwd(g_, x, training);
        }
        if (thrifty) sweep(start, cur, live);
        skips.push_back(cur);  // level 0
        live.insert(cur);

        for (int i = 0; i < S; ++i) {
            const StagePlan& sp = plan_.encoder[i];
            start = g_.size();
            VarId prev = cur;
            {
                ScopeGuard<T> sc(g_, sp.name);
                if (sp.pool != Axis3{1, 1, 1}) {
                    ScopeGuard<T> s2(g_, "pool");
                    cur = ops::maxpool3d(g_, cur, Triple{sp.pool[0], sp.pool[1], sp.pool[2]});
                }
                {
                    ScopeGuard<T> s2(g_, "trans");
                    cur = enc_[i].trans.fwd(g_, cur);
                }
                {
                    ScopeGuard<T> s2(g_, "block");
                    cur = enc_[i].block.fwd(g_, cur, training);
                }
            }
            if (thrifty) {
                if (!live.count(prev)) maybe_release(prev);
                sweep(start, cur, live);
            }
            if (i < S - 1) {
                skips.push_back(cur);  // level i + 1
                live.insert(cur);
            }
        }

        for (int j = 0; j < S; ++j) {
            const StagePlan& sp = plan_.decoder[j];
            int level = sp.level;
            start = g_.size();
            VarId prev = cur;
            {
                ScopeGuard<T> sc(g_, sp.name);
                {
                    ScopeGuard<T> s2(g_, "up");
                    cur = dec_[j].up.fwd(g_, cur);
                }
                {
                    ScopeGuard<T> s2(g_, "merge");
                    cur = ops::concat(g_, {cur, skips[level]}, 1);
                    cur = dec_[j].merge.fwd(g_, cur);
                }
                {
                    ScopeGuard<T> s2(g_, "block");
                    cur = dec_[j].block.fwd(g_, cur, training);
                }
            }
            if (thrifty) {
                if (!live.count(prev)) maybe_release(prev);
                live.erase(skips[level]);
                maybe_release(skips[level]);
                sweep(start, cur, live);
            }
        }

        start = g_.size();
        VarId prev = cur;
        VarId logits;
        {
            ScopeGuard<T> sc(g_, "head");
            logits = head_.fwd(g_, cur);
        }
        if (thrifty) {
            if (!live.count(prev)) maybe_release(prev);
            sweep(start, logits, live);
        }
        return logits;
    }

    Graph<T>& graph() { return g_; }
    ParamStore<T>& params() { return ps_; }
    const ParamStore<T>& params() const { return ps_; }
    const NetworkPlan& plan() const { return plan_; }
    const ArchSpec& arch() const { return plan_.arch; }
    size_t base_mark() const { return base_mark_; }

    // ---- checkpointing: sidecar manifest + raw little-endian float32 blob

    void save(const std::string& prefix) {
        json manifest;
        manifest["format"] = "lhunet-checkpoint";
        manifest["version"] = 1;
        manifest["arch"] = to_json(plan_.arch);
        manifest["arch_hash"] = arch_hash_hex(plan_.arch);
        json tensors = json::array();
        for (const auto& e : ps_.entries()) {
            json t;
            t["name"] = e.name;
            t["shape"] = e.shape;
            t["kind"] = e.buffer ? "buffer" : "param";
            tensors.push_back(t);
        }
        manifest["tensors"] = tensors;
        std::ofstream mf(prefix + ".json");
        require(mf.good(), "cannot write " + prefix + ".json");
        mf << manifest.dump(2) << "\n";

        std::ofstream bf(prefix + ".bin", std::ios::binary);
        require(bf.good(), "cannot write " + prefix + ".bin");
        std::vector<T> flat = ps_.flatten();
        std::vector<float> f32(flat.size());
        for (size_t i = 0; i < flat.size(); ++i) f32[i] = static_cast<float>(flat[i]);
        bf.write(reinterpret_cast<const char*>(f32.data()),
                 (std::streamsize)(f32.size() * sizeof(float)));
    }

    void load(const std::string& prefix) {
        std::ifstream mf(prefix + ".json");
        require(mf.good(), "cannot read " + prefix + ".json");
        json manifest = json::parse(mf);
        require(manifest.value("format", "") == "lhunet-checkpoint", "not a checkpoint manifest");
        require(manifest.at("arch_hash").get<std::string>() == arch_hash_hex(plan_.arch),
                "checkpoint was saved from a different architecture (hash mismatch)");
        const json& tensors = manifest.at("tensors");
        require(tensors.size() == ps_.entries().size(), "checkpoint tensor count mismatch");
        for (size_t i = 0; i < tensors.size(); ++i) {
            const auto& e = ps_.entries()[i];
            require(tensors[i].at("name").get<std::string>() == e.name,
                    "checkpoint tensor order mismatch at " + e.name);
            require(tensors[i].at("shape").get<Shape>() == e.shape,
                    "checkpoint shape mismatch at " + e.name);
        }
        std::ifstream bf(prefix + ".bin", std::ios::binary);
        require(bf.good(), "cannot read " + prefix + ".bin");
        std::vector<float> f32((size_t)ps_.n_values());
        bf.read(reinterpret_cast<char*>(f32.data()),
                (std::streamsize)(f32.size() * sizeof(float)));
        require(bf.gcount() == (std::streamsize)(f32.size() * sizeof(float)),
                "checkpoint blob truncated");
        char extra;
        require(!bf.read(&extra, 1), "checkpoint blob larger than manifest");
        std::vector<T> flat(f32.size());
        for (size_t i = 0; i < f32.size(); ++i) flat[i] = static_cast<T>(f32[i]);
        ps_.unflatten(flat);
    }

  private:
    struct EncStage {
        Conv3dLayer<T> trans;
        StageBlock<T> block;
    };
    struct DecStage {
        TConv3dLayer<T> up;
        Conv3dLayer<T> merge;
        StageBlock<T> block;
    };

    void maybe_release(VarId id) {
        if (id >= (VarId)base_mark_) g_.release(id);
    }

    // Release every node created in [from, now) except `keep` and live skips.
    void sweep(size_t from, VarId keep, const std::set<VarId>& live) {
        for (VarId id = (VarId)from; id < (VarId)g_.size(); ++id)
            if (id != keep && !live.count(id)) g_.release(id);
    }

    Graph<T> g_;
    NetworkPlan plan_;
    ParamStore<T> ps_;
    Stem<T> stem_;
    std::vector<EncStage> enc_;
    std::vector<DecStage> dec_;
    Head<T> head_;
    size_t base_mark_ = 0;
};

}  // namespace lhunet
