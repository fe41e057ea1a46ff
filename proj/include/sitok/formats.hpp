#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sitok/model.hpp"

// On-disk formats: SMEL mel dumps, token JSONL, and checkpoints.  All three
// validate on read and fail with data_error naming the offending field, so a
// truncated or foreign file never turns into silent garbage downstream.

namespace sitok {

namespace io_detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw data_error(std::string("truncated while reading ") + what);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}

inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is, const char* what) {
    const std::uint32_t bits = get_u32(is, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u32(os, std::uint32_t(bits));
    put_u32(os, std::uint32_t(bits >> 32));
}

inline double get_f64(std::istream& is, const char* what) {
    const std::uint64_t lo = get_u32(is, what);
    const std::uint64_t hi = get_u32(is, what);
    const std::uint64_t bits = lo | hi << 32;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw data_error("cannot open for writing: " + path);
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open for reading: " + path);
    return is;
}

}  // namespace io_detail

// ----- SMEL: "SMEL" + u32 version, n_frames, n_bins, valid_len; f32 rows ---

template <class Real>
struct MelFileData {
    Tensor<Real> frames;   // [n_frames, n_bins]
    int valid_len = 0;
};

inline constexpr std::uint32_t kSmelVersion = 1;

template <class Real>
void write_smel(const std::string& path, const Tensor<Real>& frames, int valid_len) {
    if (frames.ndim() != 2) throw usage_error("write_smel: frames must be 2-D");
    if (valid_len < 0 || valid_len > frames.rows())
        throw usage_error("write_smel: valid_len out of range");
    auto os = io_detail::open_out(path);
    os.write("SMEL", 4);
    io_detail::put_u32(os, kSmelVersion);
    io_detail::put_u32(os, std::uint32_t(frames.rows()));
    io_detail::put_u32(os, std::uint32_t(frames.cols()));
    io_detail::put_u32(os, std::uint32_t(valid_len));
    for (Real v : frames.data) io_detail::put_f32(os, float(v));
    if (!os) throw data_error("write failed: " + path);
}

template <class Real>
MelFileData<Real> read_smel(const std::string& path) {
    auto is = io_detail::open_in(path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "SMEL", 4) != 0)
        throw data_error("not an SMEL file: " + path);
    const auto version = io_detail::get_u32(is, "version");
    if (version != kSmelVersion)
        throw data_error("unsupported SMEL version " + std::to_string(version));
    const auto n_frames = io_detail::get_u32(is, "n_frames");
    const auto n_bins = io_detail::get_u32(is, "n_bins");
    const auto valid_len = io_detail::get_u32(is, "valid_len");
    if (n_frames == 0 || n_bins == 0)
        throw data_error("SMEL with empty dimensions: " + path);
    if (valid_len > n_frames) throw data_error("SMEL valid_len exceeds n_frames: " + path);
    MelFileData<Real> out;
    out.frames = Tensor<Real>({int(n_frames), int(n_bins)});
    for (Real& v : out.frames.data) v = Real(io_detail::get_f32(is, "frame data"));
    char extra;
    if (is.read(&extra, 1)) throw data_error("SMEL has trailing bytes: " + path);
    out.valid_len = int(valid_len);
    return out;
}

// ----- token files: one JSON object per line ------------------------------

struct TokenRecord {
    std::string id;
    double frame_rate = 0.0;
    int cn = 0;           // codebooks per frame
    int cs = 0;           // codebook size
    int valid_len = 0;    // valid stacked frames
    std::vector<std::vector<int>> tokens;
    std::string model_hash;
};

inline void write_token_file(const std::string& path, const std::vector<TokenRecord>& records) {
    auto os = io_detail::open_out(path);
    for (const auto& r : records) {
        nlohmann::json j{{"id", r.id},           {"frame_rate", r.frame_rate},
                         {"cn", r.cn},           {"cs", r.cs},
                         {"valid_len", r.valid_len}, {"tokens", r.tokens},
                         {"model_hash", r.model_hash}};
        os << j.dump() << "\n";
    }
    if (!os) throw data_error("write failed: " + path);
}

inline std::vector<TokenRecord> read_token_file(const std::string& path) {
    auto is = io_detail::open_in(path);
    std::vector<TokenRecord> out;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error("bad JSON at " + where + ": " + e.what());
        }
        TokenRecord r;
        try {
            r.id = j.at("id").get<std::string>();
            r.frame_rate = j.at("frame_rate").get<double>();
            r.cn = j.at("cn").get<int>();
            r.cs = j.at("cs").get<int>();
            r.valid_len = j.at("valid_len").get<int>();
            r.tokens = j.at("tokens").get<std::vector<std::vector<int>>>();
            r.model_hash = j.at("model_hash").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw data_error("missing or mistyped field at " + where + ": " + e.what());
        }
        if (r.cn < 1 || r.cs < 2) throw data_error("bad cn/cs at " + where);
        if (r.valid_len < 1 || r.valid_len > int(r.tokens.size()))
            throw data_error("valid_len out of range at " + where);
        for (const auto& row : r.tokens) {
            if (int(row.size()) != r.cn) throw data_error("token row width != cn at " + where);
            for (int v : row)
                if (v < 0 || v >= r.cs) throw data_error("token out of range at " + where);
        }
        out.push_back(std::move(r));
    }
    return out;
}

// ----- config <-> JSON ----------------------------------------------------

inline void to_json(nlohmann::json& j, const MelConfig& c) {
    j = {{"sample_rate", c.sample_rate}, {"n_fft", c.n_fft},   {"win_length", c.win_length},
         {"hop", c.hop},                 {"n_mels", c.n_mels}, {"fmin", c.fmin},
         {"fmax", c.fmax},               {"stack", c.stack},   {"log_floor", c.log_floor},
         {"norm_mean", c.norm_mean},     {"norm_var", c.norm_var}};
}

inline void from_json(const nlohmann::json& j, MelConfig& c) {
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    c.n_fft = j.value("n_fft", c.n_fft);
    c.win_length = j.value("win_length", c.win_length);
    c.hop = j.value("hop", c.hop);
    c.n_mels = j.value("n_mels", c.n_mels);
    c.fmin = j.value("fmin", c.fmin);
    c.fmax = j.value("fmax", c.fmax);
    c.stack = j.value("stack", c.stack);
    c.log_floor = j.value("log_floor", c.log_floor);
    c.norm_mean = j.value("norm_mean", c.norm_mean);
    c.norm_var = j.value("norm_var", c.norm_var);
}

inline void to_json(nlohmann::json& j, const QuantizerConfig& c) {
    const char* kind = c.kind == QuantKind::kVq ? "vq" : c.kind == QuantKind::kRvq ? "rvq" : "fsq";
    j = {{"kind", kind},
         {"codebook_size", c.codebook_size},
         {"code_dim", c.code_dim},
         {"num_stages", c.num_stages},
         {"ema_decay", c.ema_decay},
         {"commit_beta", c.commit_beta},
         {"fsq_levels", c.fsq_levels}};
}

inline void from_json(const nlohmann::json& j, QuantizerConfig& c) {
    const std::string kind = j.value("kind", "vq");
    if (kind == "vq")
        c.kind = QuantKind::kVq;
    else if (kind == "rvq")
        c.kind = QuantKind::kRvq;
    else if (kind == "fsq")
        c.kind = QuantKind::kFsq;
    else
        throw data_error("unknown quantizer kind: " + kind);
    c.codebook_size = j.value("codebook_size", c.codebook_size);
    c.code_dim = j.value("code_dim", c.code_dim);
    c.num_stages = j.value("num_stages", c.num_stages);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.commit_beta = j.value("commit_beta", c.commit_beta);
    c.fsq_levels = j.value("fsq_levels", c.fsq_levels);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"mel", c.mel},
         {"encoder_layers", c.encoder_layers},
         {"decoder_layers", c.decoder_layers},
         {"head_layers", c.head_layers},
         {"ctc_layers", c.ctc_layers},
         {"hidden", c.hidden},
         {"intermediate", c.intermediate},
         {"heads", c.heads},
         {"vocab", c.vocab},
         {"time_feat_dim", c.time_feat_dim},
         {"quant", c.quant},
         {"cond_drop_prob", c.cond_drop_prob},
         {"guidance_scale", c.guidance_scale},
         {"decode_steps", c.decode_steps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    if (j.contains("mel")) j.at("mel").get_to(c.mel);
    c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.head_layers = j.value("head_layers", c.head_layers);
    c.ctc_layers = j.value("ctc_layers", c.ctc_layers);
    c.hidden = j.value("hidden", c.hidden);
    c.intermediate = j.value("intermediate", c.intermediate);
    c.heads = j.value("heads", c.heads);
    c.vocab = j.value("vocab", c.vocab);
    c.time_feat_dim = j.value("time_feat_dim", c.time_feat_dim);
    if (j.contains("quant")) j.at("quant").get_to(c.quant);
    c.cond_drop_prob = j.value("cond_drop_prob", c.cond_drop_prob);
    c.guidance_scale = j.value("guidance_scale", c.guidance_scale);
    c.decode_steps = j.value("decode_steps", c.decode_steps);
}

// ----- checkpoints --------------------------------------------------------
//
// "STCK" + u32 version + u32 JSON header length + header + f64 payload.
// The header lists every tensor by name and shape in payload order; values
// are always stored as f64 so a float-trained model reloads bit-exactly
// (float -> double -> float is lossless).

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainerSnapshot {
    long step = 0;
    std::uint64_t seed = 0;
    std::string rng_state;                      // mt19937_64 text form
    std::map<std::string, Tensor<double>> opt_m, opt_v;
    long opt_updates = 0;                       // shared Adam bias-correction counter
};

template <class Real>
void save_checkpoint(const std::string& path, const Model<Real>& m,
                     const TrainerSnapshot* snap = nullptr) {
    nlohmann::json header;
    header["config"] = m.cfg;
    header["books_initialized"] = m.books_initialized;

    nlohmann::json params = nlohmann::json::array();
    for (const auto& [name, p] : m.store.by_name)
        params.push_back({{"name", name}, {"shape", p->value.shape}});
    header["params"] = params;

    nlohmann::json books = nlohmann::json::array();
    for (const auto& cb : m.books)
        books.push_back({{"size", cb.entries.rows()},
                         {"dim", cb.entries.cols()},
                         {"ema_updates", cb.ema_updates}});
    header["books"] = books;

    if (snap) {
        nlohmann::json opt;
        opt["step"] = snap->step;
        opt["seed"] = snap->seed;
        opt["rng_state"] = snap->rng_state;
        opt["opt_updates"] = snap->opt_updates;
        nlohmann::json names = nlohmann::json::array();
        for (const auto& [name, t] : snap->opt_m) {
            if (!snap->opt_v.count(name))
                throw usage_error("save_checkpoint: optimizer moment mismatch for " + name);
            names.push_back({{"name", name}, {"shape", t.shape}});
        }
        opt["moments"] = names;
        header["trainer"] = opt;
    }

    const std::string head = header.dump();
    auto os = io_detail::open_out(path);
    os.write("STCK", 4);
    io_detail::put_u32(os, kCheckpointVersion);
    io_detail::put_u32(os, std::uint32_t(head.size()));
    os.write(head.data(), std::streamsize(head.size()));

    for (const auto& [name, p] : m.store.by_name)
        for (Real v : p->value.data) io_detail::put_f64(os, double(v));
    for (const auto& cb : m.books) {
        for (Real v : cb.entries.data) io_detail::put_f64(os, double(v));
        for (Real v : cb.ema_count.data) io_detail::put_f64(os, double(v));
        for (Real v : cb.ema_sum.data) io_detail::put_f64(os, double(v));
    }
    if (snap) {
        for (const auto& [name, t] : snap->opt_m)
            for (double v : t.data) io_detail::put_f64(os, v);
        for (const auto& [name, t] : snap->opt_v)
            for (double v : t.data) io_detail::put_f64(os, v);
    }
    if (!os) throw data_error("write failed: " + path);
}

template <class Real>
Model<Real> load_checkpoint(const std::string& path, TrainerSnapshot* snap = nullptr) {
    auto is = io_detail::open_in(path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "STCK", 4) != 0)
        throw data_error("not a checkpoint file: " + path);
    if (io_detail::get_u32(is, "version") != kCheckpointVersion)
        throw data_error("unsupported checkpoint version: " + path);
    const auto head_len = io_detail::get_u32(is, "header length");
    std::string head(head_len, '\0');
    if (!is.read(head.data(), head_len)) throw data_error("truncated checkpoint header: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(head);
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("bad checkpoint header: ") + e.what());
    }

    ModelConfig cfg = header.at("config").get<ModelConfig>();
    Model<Real> m = build_model<Real>(cfg, 0);
    m.books_initialized = header.value("books_initialized", false);

    for (const auto& entry : header.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<int>>();
        auto it = m.store.by_name.find(name);
        if (it == m.store.by_name.end())
            throw data_error("checkpoint has unknown parameter " + name);
        if (it->second->value.shape != shape)
            throw data_error("checkpoint shape mismatch for " + name);
        for (Real& v : it->second->value.data)
            v = Real(io_detail::get_f64(is, name.c_str()));
    }
    const auto books = header.at("books");
    if (int(books.size()) != int(m.books.size()))
        throw data_error("checkpoint codebook count mismatch");
    for (std::size_t i = 0; i < m.books.size(); ++i) {
        auto& cb = m.books[i];
        if (books[i].at("size").get<int>() != cb.entries.rows() ||
            books[i].at("dim").get<int>() != cb.entries.cols())
            throw data_error("checkpoint codebook shape mismatch");
        cb.ema_updates = books[i].value("ema_updates", 0L);
        for (Real& v : cb.entries.data) v = Real(io_detail::get_f64(is, "codebook"));
        for (Real& v : cb.ema_count.data) v = Real(io_detail::get_f64(is, "codebook"));
        for (Real& v : cb.ema_sum.data) v = Real(io_detail::get_f64(is, "codebook"));
    }

    if (header.contains("trainer")) {
        const auto& tr = header.at("trainer");
        TrainerSnapshot local;
        TrainerSnapshot& s = snap ? *snap : local;
        s.step = tr.at("step").get<long>();
        s.seed = tr.at("seed").get<std::uint64_t>();
        s.rng_state = tr.at("rng_state").get<std::string>();
        s.opt_updates = tr.value("opt_updates", 0L);
        std::vector<std::string> names;
        for (const auto& entry : tr.at("moments")) {
            const std::string name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<std::vector<int>>();
            s.opt_m.emplace(name, Tensor<double>(shape));
            s.opt_v.emplace(name, Tensor<double>(shape));
            names.push_back(name);
        }
        for (const auto& n : names)
            for (double& v : s.opt_m.at(n).data) v = io_detail::get_f64(is, "opt m");
        for (const auto& n : names)
            for (double& v : s.opt_v.at(n).data) v = io_detail::get_f64(is, "opt v");
    } else if (snap) {
        throw data_error("checkpoint has no trainer state: " + path);
    }
    char extra;
    if (is.read(&extra, 1)) throw data_error("checkpoint has trailing bytes: " + path);
    return m;
}

}  // namespace sitok
