#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "clipspot/core.hpp"
#include "clipspot/rng.hpp"
#include "clipspot/serialize.hpp"
#include "clipspot/tensor.hpp"

namespace clipspot {

struct TaskGenConfig {
    int clips = 128;            // L
    int d_room = 8;             // width of the room channel
    int d_inter = 8;            // width of the interaction channel
    int d_obj = 8;              // width of the object channel
    int d_expensive = 64;       // D_v
    int query_len = 4;          // T
    int event_vocab = 64;       // fine event count E
    int rooms = 6;
    int interactions = 8;
    int objects = 10;
    double response_ratio = 0.04;   // mean GT length fraction of L
    double cheap_noise = 0.6;       // sigma_s
    double expensive_noise = 0.1;   // sigma_v
    double distractor_rate = 0.3;   // chance a segment is relabeled to the target's coarse triple
    std::uint64_t seed = 0;

    int d_cheap() const { return d_room + d_inter + d_obj; }
    int vocab_size() const { return rooms + interactions + objects + event_vocab; }

    void validate() const {
        if (clips < 1 || d_room < 1 || d_inter < 1 || d_obj < 1 || d_expensive < 1)
            throw std::invalid_argument("config error: dimensions must be positive");
        if (response_ratio * clips < 2.0) throw std::invalid_argument("response too short");
        if (!(cheap_noise > expensive_noise) || expensive_noise < 0.0)
            throw std::invalid_argument("config error: require cheap_noise > expensive_noise >= 0");
        if (query_len != 4)
            throw std::invalid_argument("config error: query length must be 4 (room, interaction, object, event tokens)");
        if (event_vocab < 2) throw std::invalid_argument("config error: event_vocab must be >= 2");
        const long long triples = 1LL * rooms * interactions * objects;
        if ((event_vocab + 1) / 2 > triples)
            throw std::invalid_argument("config error: event vocabulary too large for coarse bins");
    }
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split: " + s);
}

struct SyntheticDataset {
    std::vector<EMInstance> instances;
    TaskGenConfig config;
    Split split = Split::train;
};

struct CoarseTriple {
    int room = 0;
    int interaction = 0;
    int object = 0;
    bool operator==(const CoarseTriple&) const = default;
};

// Dataset-fixed lookup tables: fine event ids are grouped (pairs; last group of
// three when E is odd) and every group maps to a distinct coarse triple, so
// each fine event has at least one same-triple sibling that only the expensive
// features can tell apart.
struct CategoryTables {
    std::vector<CoarseTriple> fine_to_triple;   // per fine id
    std::vector<int> group_of;                  // group index per fine id
    std::vector<std::vector<int>> group_members;
    MatD room_table;   // rooms x d_room
    MatD inter_table;  // interactions x d_inter
    MatD obj_table;    // objects x d_obj
    MatD fine_table;   // event_vocab x d_expensive
};

inline CategoryTables build_tables(const TaskGenConfig& cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, "tables"));
    CategoryTables t;

    const int e = cfg.event_vocab;
    const int n_groups = e / 2;  // last group absorbs the odd id
    t.group_members.resize(n_groups);
    t.group_of.resize(e);
    for (int f = 0; f < e; ++f) {
        const int g = std::min(f / 2, n_groups - 1);
        t.group_of[f] = g;
        t.group_members[g].push_back(f);
    }

    const long long total = 1LL * cfg.rooms * cfg.interactions * cfg.objects;
    std::set<long long> used;
    std::vector<CoarseTriple> group_triple(n_groups);
    for (int g = 0; g < n_groups; ++g) {
        long long code;
        do {
            code = static_cast<long long>(rng.uniform_int(static_cast<std::uint64_t>(total)));
        } while (used.count(code));
        used.insert(code);
        CoarseTriple tr;
        tr.room = static_cast<int>(code % cfg.rooms);
        tr.interaction = static_cast<int>((code / cfg.rooms) % cfg.interactions);
        tr.object = static_cast<int>(code / (cfg.rooms * cfg.interactions));
        group_triple[g] = tr;
    }
    t.fine_to_triple.resize(e);
    for (int f = 0; f < e; ++f) t.fine_to_triple[f] = group_triple[t.group_of[f]];

    t.room_table = gaussian_mat<double>(cfg.rooms, cfg.d_room, 1.0, rng);
    t.inter_table = gaussian_mat<double>(cfg.interactions, cfg.d_inter, 1.0, rng);
    t.obj_table = gaussian_mat<double>(cfg.objects, cfg.d_obj, 1.0, rng);
    t.fine_table = gaussian_mat<double>(cfg.event_vocab, cfg.d_expensive, 1.0, rng);
    return t;
}

// Global token ids for the four query slots.
inline int room_token(const TaskGenConfig& c, int r) { return r; }
inline int inter_token(const TaskGenConfig& c, int i) { return c.rooms + i; }
inline int obj_token(const TaskGenConfig& c, int o) { return c.rooms + c.interactions + o; }
inline int fine_token(const TaskGenConfig& c, int f) {
    return c.rooms + c.interactions + c.objects + f;
}

inline EMInstance generate_instance(const TaskGenConfig& cfg, const CategoryTables& tables,
                                    Rng& rng, const std::string& instance_id) {
    cfg.validate();
    const int L = cfg.clips;
    const double mean_len = cfg.response_ratio * L;

    // 1. contiguous segments with geometric lengths
    std::vector<int> seg_start, seg_len;
    for (int pos = 0; pos < L;) {
        int len = std::min(rng.geometric(mean_len), L - pos);
        seg_start.push_back(pos);
        seg_len.push_back(len);
        pos += len;
    }
    const int n_segs = static_cast<int>(seg_start.size());

    // fine event per segment; segment groups are drawn without replacement
    // where possible so coarse triples never collide by accident
    const int n_groups = static_cast<int>(tables.group_members.size());
    std::vector<int> seg_group(n_segs);
    if (n_segs <= n_groups) {
        std::vector<int> pool(n_groups);
        for (int g = 0; g < n_groups; ++g) pool[g] = g;
        rng.shuffle(pool);
        for (int s = 0; s < n_segs; ++s) seg_group[s] = pool[s];
    } else {
        for (int s = 0; s < n_segs; ++s)
            seg_group[s] = static_cast<int>(rng.uniform_int(n_groups));
    }
    std::vector<int> seg_fine(n_segs);
    for (int s = 0; s < n_segs; ++s) {
        const auto& members = tables.group_members[seg_group[s]];
        seg_fine[s] = members[rng.uniform_int(members.size())];
    }

    // 2. target segment; resolve accidental group collisions against it
    const int target = static_cast<int>(rng.uniform_int(n_segs));
    for (int s = 0; s < n_segs; ++s) {
        if (s == target) continue;
        while (seg_group[s] == seg_group[target]) {
            seg_group[s] = static_cast<int>(rng.uniform_int(n_groups));
            const auto& members = tables.group_members[seg_group[s]];
            seg_fine[s] = members[rng.uniform_int(members.size())];
        }
    }

    // distractors: relabel to a same-triple sibling of the target event
    const auto& target_members = tables.group_members[seg_group[target]];
    std::vector<int> siblings;
    for (int m : target_members)
        if (m != seg_fine[target]) siblings.push_back(m);
    int n_distractors = 0;
    for (int s = 0; s < n_segs; ++s) {
        if (s == target || siblings.empty()) continue;
        if (rng.bernoulli(cfg.distractor_rate)) {
            seg_fine[s] = siblings[rng.uniform_int(siblings.size())];
            seg_group[s] = seg_group[target];
            ++n_distractors;
        }
    }
    // with distractors enabled, guarantee at least one same-triple segment so
    // the cheap channels alone can never fully disambiguate
    if (cfg.distractor_rate > 0.0 && n_segs >= 2 && n_distractors == 0 && !siblings.empty()) {
        int s = static_cast<int>(rng.uniform_int(n_segs - 1));
        if (s >= target) ++s;
        seg_fine[s] = siblings[rng.uniform_int(siblings.size())];
        seg_group[s] = seg_group[target];
    }

    // 3+4. ground truth and query tokens
    EMInstance inst;
    inst.clip_count = L;
    inst.instance_id = instance_id;
    inst.ground_truth = {seg_start[target], seg_start[target] + seg_len[target] - 1};
    const CoarseTriple tr = tables.fine_to_triple[seg_fine[target]];
    inst.query_tokens = {static_cast<std::int32_t>(room_token(cfg, tr.room)),
                         static_cast<std::int32_t>(inter_token(cfg, tr.interaction)),
                         static_cast<std::int32_t>(obj_token(cfg, tr.object)),
                         static_cast<std::int32_t>(fine_token(cfg, seg_fine[target]))};

    // 5+6. per-clip features
    inst.cheap_features.resize(L, cfg.d_cheap());
    inst.expensive_features.resize(L, cfg.d_expensive);
    for (int s = 0; s < n_segs; ++s) {
        const CoarseTriple st = tables.fine_to_triple[seg_fine[s]];
        for (int l = seg_start[s]; l < seg_start[s] + seg_len[s]; ++l) {
            int c = 0;
            for (int d = 0; d < cfg.d_room; ++d, ++c)
                inst.cheap_features(l, c) = static_cast<float>(
                    tables.room_table(st.room, d) + cfg.cheap_noise * rng.normal());
            for (int d = 0; d < cfg.d_inter; ++d, ++c)
                inst.cheap_features(l, c) = static_cast<float>(
                    tables.inter_table(st.interaction, d) + cfg.cheap_noise * rng.normal());
            for (int d = 0; d < cfg.d_obj; ++d, ++c)
                inst.cheap_features(l, c) = static_cast<float>(
                    tables.obj_table(st.object, d) + cfg.cheap_noise * rng.normal());
            for (int d = 0; d < cfg.d_expensive; ++d)
                inst.expensive_features(l, d) = static_cast<float>(
                    tables.fine_table(seg_fine[s], d) + cfg.expensive_noise * rng.normal());
        }
    }
    return inst;
}

inline std::string make_instance_id(const TaskGenConfig& cfg, Split split, int index) {
    return std::string(split_name(split)) + "-" + std::to_string(cfg.seed) + "-" +
           std::to_string(index);
}

inline SyntheticDataset generate_dataset(const TaskGenConfig& cfg, int n_instances, Split split) {
    cfg.validate();
    if (n_instances < 1) throw std::invalid_argument("n_instances must be >= 1");
    const CategoryTables tables = build_tables(cfg);
    SyntheticDataset ds;
    ds.config = cfg;
    ds.split = split;
    ds.instances.reserve(n_instances);
    for (int i = 0; i < n_instances; ++i) {
        Rng rng(derive_seed(cfg.seed, split_name(split), static_cast<std::uint64_t>(i)));
        ds.instances.push_back(generate_instance(cfg, tables, rng, make_instance_id(cfg, split, i)));
    }
    return ds;
}

// Zero one cheap channel (0=room, 1=interaction, 2=object). Used by the
// channel-removal ablation at both train and eval time.
inline SyntheticDataset zero_channel(SyntheticDataset ds, int channel) {
    if (channel < 0 || channel > 2) throw std::invalid_argument("channel must be 0, 1, or 2");
    const auto& c = ds.config;
    const int offsets[4] = {0, c.d_room, c.d_room + c.d_inter, c.d_cheap()};
    const int c0 = offsets[channel], n = offsets[channel + 1] - offsets[channel];
    for (auto& inst : ds.instances) inst.cheap_features.middleCols(c0, n).setZero();
    return ds;
}

// ---- on-disk format ----------------------------------------------------------
//
// directory:
//   manifest          JSON: config fields, n_instances, split, format_version=1
//   cheap.f32         (n*L, D_s) row-major float32
//   expensive.f32     (n*L, D_v) row-major float32
//   queries.i32       (n, T) int32
//   windows.i32       (n, 2) int32

inline void write_dataset(const SyntheticDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto& c = ds.config;
    const int n = static_cast<int>(ds.instances.size());

    io::json m;
    m["format_version"] = 1;
    m["split"] = split_name(ds.split);
    m["n_instances"] = n;
    m["L"] = c.clips;
    m["D_r"] = c.d_room;
    m["D_i"] = c.d_inter;
    m["D_o"] = c.d_obj;
    m["D_v"] = c.d_expensive;
    m["T"] = c.query_len;
    m["event_vocab"] = c.event_vocab;
    m["rooms"] = c.rooms;
    m["interactions"] = c.interactions;
    m["objects"] = c.objects;
    m["response_ratio"] = c.response_ratio;
    m["cheap_noise"] = c.cheap_noise;
    m["expensive_noise"] = c.expensive_noise;
    m["distractor_rate"] = c.distractor_rate;
    m["seed"] = c.seed;
    io::write_text(dir / "manifest", m.dump(2));

    std::vector<float> cheap, expensive;
    std::vector<std::int32_t> queries, windows;
    cheap.reserve(static_cast<std::size_t>(n) * c.clips * c.d_cheap());
    expensive.reserve(static_cast<std::size_t>(n) * c.clips * c.d_expensive);
    for (const auto& inst : ds.instances) {
        cheap.insert(cheap.end(), inst.cheap_features.data(),
                     inst.cheap_features.data() + inst.cheap_features.size());
        expensive.insert(expensive.end(), inst.expensive_features.data(),
                         inst.expensive_features.data() + inst.expensive_features.size());
        queries.insert(queries.end(), inst.query_tokens.begin(), inst.query_tokens.end());
        windows.push_back(inst.ground_truth.start);
        windows.push_back(inst.ground_truth.end);
    }
    io::write_array(dir / "cheap.f32", cheap.data(), cheap.size());
    io::write_array(dir / "expensive.f32", expensive.data(), expensive.size());
    io::write_array(dir / "queries.i32", queries.data(), queries.size());
    io::write_array(dir / "windows.i32", windows.data(), windows.size());
}

namespace detail {
template <class T>
T manifest_get(const io::json& m, const char* key) {
    if (!m.contains(key)) throw std::runtime_error(std::string("malformed manifest: missing ") + key);
    try {
        return m.at(key).get<T>();
    } catch (const std::exception&) {
        throw std::runtime_error(std::string("malformed manifest: bad field ") + key);
    }
}

template <class T>
std::vector<T> read_matrix_file(const std::filesystem::path& path, long long rows, int cols,
                                const char* what) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error(std::string("missing array file: ") + what);
    f.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(f.tellg());
    f.seekg(0, std::ios::beg);
    if (bytes % (sizeof(T) * cols) != 0)
        throw std::runtime_error(std::string("truncated array file: ") + what);
    const long long got_rows = static_cast<long long>(bytes / (sizeof(T) * cols));
    if (got_rows != rows) throw std::runtime_error(std::string("dimension mismatch: ") + what);
    std::vector<T> out(static_cast<std::size_t>(rows) * cols);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw std::runtime_error(std::string("truncated array file: ") + what);
    return out;
}
}  // namespace detail

inline SyntheticDataset read_dataset(const std::filesystem::path& dir) {
    const io::json m = io::parse_manifest(dir / "manifest", "dataset");
    if (detail::manifest_get<int>(m, "format_version") != 1)
        throw std::runtime_error("malformed manifest: unsupported format_version");

    TaskGenConfig c;
    c.clips = detail::manifest_get<int>(m, "L");
    c.d_room = detail::manifest_get<int>(m, "D_r");
    c.d_inter = detail::manifest_get<int>(m, "D_i");
    c.d_obj = detail::manifest_get<int>(m, "D_o");
    c.d_expensive = detail::manifest_get<int>(m, "D_v");
    c.query_len = detail::manifest_get<int>(m, "T");
    c.event_vocab = detail::manifest_get<int>(m, "event_vocab");
    c.rooms = detail::manifest_get<int>(m, "rooms");
    c.interactions = detail::manifest_get<int>(m, "interactions");
    c.objects = detail::manifest_get<int>(m, "objects");
    c.response_ratio = detail::manifest_get<double>(m, "response_ratio");
    c.cheap_noise = detail::manifest_get<double>(m, "cheap_noise");
    c.expensive_noise = detail::manifest_get<double>(m, "expensive_noise");
    c.distractor_rate = detail::manifest_get<double>(m, "distractor_rate");
    c.seed = detail::manifest_get<std::uint64_t>(m, "seed");
    const int n = detail::manifest_get<int>(m, "n_instances");
    const Split split = split_from_name(detail::manifest_get<std::string>(m, "split"));

    const auto cheap =
        detail::read_matrix_file<float>(dir / "cheap.f32", 1LL * n * c.clips, c.d_cheap(), "cheap.f32");
    const auto expensive = detail::read_matrix_file<float>(
        dir / "expensive.f32", 1LL * n * c.clips, c.d_expensive, "expensive.f32");
    const auto queries = detail::read_matrix_file<std::int32_t>(dir / "queries.i32", n,
                                                                c.query_len, "queries.i32");
    const auto windows =
        detail::read_matrix_file<std::int32_t>(dir / "windows.i32", n, 2, "windows.i32");

    SyntheticDataset ds;
    ds.config = c;
    ds.split = split;
    ds.instances.resize(n);
    for (int i = 0; i < n; ++i) {
        EMInstance& inst = ds.instances[i];
        inst.clip_count = c.clips;
        inst.instance_id = make_instance_id(c, split, i);
        inst.cheap_features.resize(c.clips, c.d_cheap());
        std::copy_n(cheap.data() + 1LL * i * c.clips * c.d_cheap(),
                    1LL * c.clips * c.d_cheap(), inst.cheap_features.data());
        inst.expensive_features.resize(c.clips, c.d_expensive);
        std::copy_n(expensive.data() + 1LL * i * c.clips * c.d_expensive,
                    1LL * c.clips * c.d_expensive, inst.expensive_features.data());
        inst.query_tokens.assign(queries.begin() + 1LL * i * c.query_len,
                                 queries.begin() + 1LL * (i + 1) * c.query_len);
        inst.ground_truth = {windows[2 * i], windows[2 * i + 1]};
        if (!inst.ground_truth.valid(c.clips))
            throw std::runtime_error("dimension mismatch: windows.i32 out of range");
    }
    return ds;
}

}  // namespace clipspot
