#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "clipspot/autodiff.hpp"
#include "clipspot/rng.hpp"
#include "clipspot/serialize.hpp"
#include "clipspot/tensor.hpp"

namespace clipspot {

// Named trainable arrays in fixed creation order. The order defines the
// optimizer walk and the checkpoint layout, so runs are reproducible.
template <class S>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Mat<S> value;
    };

    int add(const std::string& name, Mat<S> value) {
        if (by_name_.count(name)) throw std::logic_error("duplicate parameter: " + name);
        by_name_[name] = static_cast<int>(entries_.size());
        entries_.push_back({name, std::move(value)});
        return static_cast<int>(entries_.size()) - 1;
    }

    int index_of(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }

    Entry& entry(int i) { return entries_[i]; }
    const Entry& entry(int i) const { return entries_[i]; }
    int size() const { return static_cast<int>(entries_.size()); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
        return n;
    }

    // Hash over (name, rows, cols); equal iff architectures match.
    std::uint64_t shape_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](std::uint64_t x) {
            h ^= splitmix64(x);
            h *= 0x100000001b3ULL;
        };
        for (const auto& e : entries_) {
            mix(hash_label(e.name));
            mix(static_cast<std::uint64_t>(e.value.rows()));
            mix(static_cast<std::uint64_t>(e.value.cols()));
        }
        return h;
    }

    bool all_finite() const {
        for (const auto& e : entries_)
            if (!e.value.allFinite()) return false;
        return true;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> by_name_;
};

// Parameters bound onto one tape (leaf vars in entry order).
template <class S>
struct BoundParams {
    std::vector<ad::Var<S>> vars;

    ad::Var<S> operator[](int i) const { return vars[i]; }
};

template <class S>
BoundParams<S> bind(ad::Tape<S>& t, const ParamStore<S>& store, bool trainable) {
    BoundParams<S> b;
    b.vars.reserve(store.size());
    for (int i = 0; i < store.size(); ++i)
        b.vars.push_back(ad::leaf(t, store.entry(i).value, trainable));
    return b;
}

// Per-thread gradient accumulator, summed deterministically by the trainer.
template <class S>
struct GradBuffer {
    std::vector<Mat<S>> g;

    void init(const ParamStore<S>& store) {
        g.clear();
        g.reserve(store.size());
        for (int i = 0; i < store.size(); ++i) {
            const auto& v = store.entry(i).value;
            g.push_back(Mat<S>::Zero(v.rows(), v.cols()));
        }
    }
    void zero() {
        for (auto& m : g) m.setZero();
    }
    void add_from(const GradBuffer& other) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += other.g[i];
    }
};

template <class S>
void harvest_grads(ad::Tape<S>& t, const BoundParams<S>& b, GradBuffer<S>& out) {
    for (std::size_t i = 0; i < b.vars.size(); ++i) {
        const int id = b.vars[i].id;
        if (t.has_grad(id)) out.g[i] += t.grad(id);
    }
}

// ---- checkpoint format --------------------------------------------------------
//
// <dir>/params.json : {"format_version":1, "model":<caller config>, "entries":[{name,rows,cols}...]}
// <dir>/params.f32  : float32 arrays concatenated row-major in entry order

template <class S>
void write_checkpoint(const ParamStore<S>& store, const io::json& model_config,
                      const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    io::json m;
    m["format_version"] = 1;
    m["model"] = model_config;
    io::json entries = io::json::array();
    std::vector<float> data;
    data.reserve(store.scalar_count());
    for (int i = 0; i < store.size(); ++i) {
        const auto& e = store.entry(i);
        entries.push_back({{"name", e.name},
                           {"rows", e.value.rows()},
                           {"cols", e.value.cols()}});
        for (Eigen::Index k = 0; k < e.value.size(); ++k)
            data.push_back(static_cast<float>(e.value.data()[k]));
    }
    m["entries"] = entries;
    io::write_text(dir / "params.json", m.dump(2));
    io::write_array(dir / "params.f32", data.data(), data.size());
}

// Loads values into an existing store; shapes must match the manifest.
template <class S>
io::json read_checkpoint(ParamStore<S>& store, const std::filesystem::path& dir) {
    const io::json m = io::parse_manifest(dir / "params.json", "checkpoint");
    if (!m.contains("entries")) throw std::runtime_error("malformed manifest: missing entries");
    const auto& entries = m.at("entries");
    if (static_cast<int>(entries.size()) != store.size())
        throw std::runtime_error("dimension mismatch: checkpoint entry count");
    std::size_t total = 0;
    for (const auto& e : entries) total += e.at("rows").get<std::size_t>() * e.at("cols").get<std::size_t>();
    const auto data = io::read_array<float>(dir / "params.f32", total);
    std::size_t off = 0;
    for (int i = 0; i < store.size(); ++i) {
        auto& dst = store.entry(i);
        const auto& e = entries[i];
        if (e.at("name").get<std::string>() != dst.name ||
            e.at("rows").get<int>() != dst.value.rows() ||
            e.at("cols").get<int>() != dst.value.cols())
            throw std::runtime_error("dimension mismatch: checkpoint entry " + dst.name);
        for (Eigen::Index k = 0; k < dst.value.size(); ++k)
            dst.value.data()[k] = static_cast<S>(data[off + k]);
        off += static_cast<std::size_t>(dst.value.size());
    }
    return m.at("model");
}

}  // namespace clipspot
