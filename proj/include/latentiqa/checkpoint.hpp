#pragma once

// Flat named-parameter archive with a sidecar config, and the adapter seam
// that wraps an archived backbone behind the DenoiserBackbone interface.
//
// Archive layout (little-endian):
//   "LIQA" | u32 version | u32 entry count
//   per entry: u32 name length | name bytes | u32 rows | u32 cols | rows*cols f64 (column-major)
//   u64 FNV-1a hash of every preceding byte

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "backbone.hpp"
#include "bundle.hpp"
#include "config.hpp"
#include "error.hpp"

namespace liqa {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using ParameterArchive = std::map<std::string, Eigen::MatrixXd>;

namespace archive_detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    Reader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string get_string(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t position() const { return pos_; }

private:
    void need(std::size_t n) const {
        require(pos_ + n <= bytes_.size(), ErrorKind::CorruptArchive, origin_ + " is truncated");
    }

    const std::string& bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

} // namespace archive_detail

inline std::string encode_archive(const ParameterArchive& params) {
    std::string out = "LIQA";
    archive_detail::put<std::uint32_t>(out, kCheckpointVersion);
    archive_detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, m] : params) {
        archive_detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        archive_detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
        archive_detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
        out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    archive_detail::put<std::uint64_t>(out, archive_detail::fnv1a(out));
    return out;
}

inline ParameterArchive decode_archive(const std::string& bytes, const std::string& origin = "archive") {
    require(bytes.size() >= 4 + 4 + 4 + 8 && bytes.compare(0, 4, "LIQA") == 0, ErrorKind::CorruptArchive,
            origin + " is not a parameter archive");
    const std::string body = bytes.substr(0, bytes.size() - 8);
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + body.size(), 8);
    archive_detail::Reader r(body, origin);
    r.get_string(4);
    const auto version = r.get<std::uint32_t>();
    require(version == kCheckpointVersion, ErrorKind::VersionMismatch,
            origin + " has version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
    require(stored == archive_detail::fnv1a(body), ErrorKind::CorruptArchive, origin + " fails its checksum");
    const auto count = r.get<std::uint32_t>();
    ParameterArchive out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint32_t>();
        const std::string name = r.get_string(len);
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        const std::string raw = r.get_string(static_cast<std::size_t>(rows) * cols * sizeof(double));
        Eigen::MatrixXd m(rows, cols);
        std::memcpy(m.data(), raw.data(), raw.size());
        require(out.emplace(name, std::move(m)).second, ErrorKind::CorruptArchive, origin + " repeats entry " + name);
    }
    require(r.position() == body.size(), ErrorKind::CorruptArchive, origin + " has trailing bytes");
    return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::Io, "short write to " + path.string());
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& archive) {
    return std::filesystem::path(archive.string() + ".cfg");
}

/// Run config plus the checkpoint's own keys (prefixed `checkpoint.`).
inline std::string sidecar_text(const ModelBundle& bundle) {
    std::ostringstream os;
    os << "# checkpoint sidecar\n";
    os << "checkpoint.version = " << kCheckpointVersion << "\n";
    os << "checkpoint.mos_lo = " << config_detail::from_double(bundle.mos.lo) << "\n";
    os << "checkpoint.mos_hi = " << config_detail::from_double(bundle.mos.hi) << "\n";
    if (!bundle.train_db.empty()) os << "checkpoint.train_db = " << bundle.train_db << "\n";
    os << bundle.config.to_text();
    return os.str();
}

struct Sidecar {
    RunConfig config;
    MosNormalization mos;
    std::string train_db;
    std::uint32_t version = 0;
};

inline Sidecar parse_sidecar(const std::string& text, const std::string& origin) {
    Sidecar s;
    std::string rest;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const std::string t = config_detail::trim(line);
        const auto eq = t.find('=');
        if (t.rfind("checkpoint.", 0) == 0 && eq != std::string::npos) {
            const std::string key = config_detail::trim(t.substr(0, eq));
            const std::string value = config_detail::trim(t.substr(eq + 1));
            if (key == "checkpoint.version")
                s.version = static_cast<std::uint32_t>(config_detail::to_u64(key, value));
            else if (key == "checkpoint.mos_lo")
                s.mos.lo = config_detail::to_double(key, value);
            else if (key == "checkpoint.mos_hi")
                s.mos.hi = config_detail::to_double(key, value);
            else if (key == "checkpoint.train_db")
                s.train_db = value;
            else
                fail(ErrorKind::Parse, origin + ": unknown key " + key);
            rest += "\n";
        } else {
            rest += line + "\n";
        }
    }
    require(s.version == kCheckpointVersion, ErrorKind::VersionMismatch,
            origin + " has version " + std::to_string(s.version) + ", expected " + std::to_string(kCheckpointVersion));
    apply_config_text(s.config, rest, origin);
    return s;
}

inline ParameterArchive bundle_archive(const ModelBundle& bundle) {
    ParameterArchive a;
    for (const NamedConstParameter& p : bundle.parameters()) a[p.name] = *p.value;
    return a;
}

/// Overwrites every parameter of `bundle` from the archive; every name must
/// be present with the expected shape.
inline void load_parameters(ModelBundle& bundle, const ParameterArchive& archive, const std::string& origin) {
    for (NamedParameter& p : bundle.parameters()) {
        auto it = archive.find(p.name);
        require(it != archive.end(), ErrorKind::MissingKey, origin + " has no entry '" + p.name + "'");
        require(it->second.rows() == p.value->rows() && it->second.cols() == p.value->cols(), ErrorKind::ShapeMismatch,
                origin + ": entry '" + p.name + "' has shape " + std::to_string(it->second.rows()) + "x" +
                    std::to_string(it->second.cols()) + ", expected " + std::to_string(p.value->rows()) + "x" +
                    std::to_string(p.value->cols()));
        *p.value = it->second;
    }
}

inline void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path) {
    write_file_bytes(path, encode_archive(bundle_archive(bundle)));
    write_file_bytes(sidecar_path(path), sidecar_text(bundle));
}

inline ModelBundle build_bundle(const RunConfig& cfg);

inline ModelBundle load_checkpoint(const std::filesystem::path& path) {
    require(std::filesystem::exists(path), ErrorKind::MissingCheckpoint, "checkpoint not found: " + path.string());
    const std::filesystem::path side = sidecar_path(path);
    require(std::filesystem::exists(side), ErrorKind::MissingCheckpoint, "checkpoint sidecar not found: " + side.string());
    const ParameterArchive archive = decode_archive(read_file_bytes(path), path.string());
    const Sidecar sc = parse_sidecar(read_file_bytes(side), side.string());
    ModelBundle b = build_bundle(sc.config);
    load_parameters(b, archive, path.string());
    b.mos = sc.mos;
    b.train_db = sc.train_db;
    return b;
}

/// External backbone descriptor: an archive path and the token count of
/// every cross-attention block it is expected to expose.
struct AdapterDescriptor {
    std::filesystem::path checkpoint;
    std::vector<int> block_tokens;
};

inline AdapterDescriptor parse_adapter_descriptor(const RunConfig& cfg) {
    require(!cfg.adapter_checkpoint.empty(), ErrorKind::InvalidConfig, "adapter.checkpoint is not set");
    AdapterDescriptor d;
    d.checkpoint = cfg.adapter_checkpoint;
    std::stringstream ss(cfg.adapter_blocks);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = config_detail::trim(item);
        if (!item.empty()) d.block_tokens.push_back(config_detail::to_int("adapter.blocks", item));
    }
    require(!d.block_tokens.empty(), ErrorKind::InvalidConfig, "adapter.blocks lists no blocks");
    return d;
}

struct AttachedBackbone {
    std::shared_ptr<LatentCodec> codec;
    std::shared_ptr<DenoiserBackbone> backbone;
    RunConfig source_config;
};

/// Wraps an archived backbone. Only archives written by this library with a
/// toy backbone can be materialised in-process; anything else needs an
/// out-of-process runtime and is reported as unsupported.
inline AttachedBackbone attach_pretrained_adapter(const AdapterDescriptor& d) {
    require(std::filesystem::exists(d.checkpoint), ErrorKind::MissingCheckpoint,
            "adapter checkpoint not found: " + d.checkpoint.string());
    const std::filesystem::path side = sidecar_path(d.checkpoint);
    require(std::filesystem::exists(side), ErrorKind::MissingCheckpoint,
            "adapter sidecar not found: " + side.string());
    const Sidecar sc = parse_sidecar(read_file_bytes(side), side.string());
    require(sc.config.backbone == "toy", ErrorKind::Unsupported,
            "backbone kind '" + sc.config.backbone + "' has no in-process runtime");
    const ParameterArchive archive = decode_archive(read_file_bytes(d.checkpoint), d.checkpoint.string());

    RunConfig src = sc.config;
    Rng codec_rng = derive_rng(src.seed, {1});
    auto codec = std::make_shared<ToyCodec>(src.resolution, src.downsample_factor, src.latent_channels, src.latent_scale,
                                            codec_rng);
    Rng backbone_rng = derive_rng(src.seed, {2});
    auto backbone = std::make_shared<ToyBackbone>(toy_backbone_config(src), backbone_rng);

    const auto& specs = backbone->block_specs();
    std::string have;
    for (const BackboneBlockSpec& s : specs) have += (have.empty() ? "" : ",") + std::to_string(s.tokens);
    std::string want;
    for (int n : d.block_tokens) want += (want.empty() ? "" : ",") + std::to_string(n);
    require(specs.size() == d.block_tokens.size(), ErrorKind::TopologyMismatch,
            "descriptor lists " + std::to_string(d.block_tokens.size()) + " blocks (" + want + "), archive has " +
                std::to_string(specs.size()) + " (" + have + ")");
    for (std::size_t i = 0; i < specs.size(); ++i)
        require(specs[i].tokens == d.block_tokens[i], ErrorKind::TopologyMismatch,
                "block token counts differ: descriptor " + want + ", archive " + have);

    for (auto& p : codec->parameters()) {
        auto it = archive.find(p.name);
        require(it != archive.end(), ErrorKind::MissingKey, d.checkpoint.string() + " has no entry '" + p.name + "'");
        *p.value = it->second;
    }
    for (auto& p : backbone->parameters()) {
        auto it = archive.find(p.name);
        require(it != archive.end(), ErrorKind::MissingKey, d.checkpoint.string() + " has no entry '" + p.name + "'");
        require(it->second.rows() == p.value->rows() && it->second.cols() == p.value->cols(), ErrorKind::ShapeMismatch,
                "entry '" + p.name + "' has the wrong shape");
        *p.value = it->second;
    }
    return AttachedBackbone{codec, backbone, src};
}

/// Builds a bundle for any supported `backbone` value: "toy" constructs the
/// desk-scale model, "adapter" attaches an archived backbone and puts fresh
/// zero-initialised adapters and prompts on top of it.
inline ModelBundle build_bundle(const RunConfig& cfg) {
    if (cfg.backbone != "adapter") return build_toy_bundle(cfg);
    cfg.validate();
    AttachedBackbone att = attach_pretrained_adapter(parse_adapter_descriptor(cfg));
    RunConfig merged = cfg;
    for (const char* key : {"resolution", "latent_channels", "downsample_factor", "latent_scale", "base_width",
                            "num_blocks", "d_tau", "attn_dim"})
        merged.set(key, att.source_config.get(key));
    ModelBundle b;
    b.config = merged;
    b.schedule = build_linear_schedule(merged.total_timesteps, merged.beta_start, merged.beta_end);
    b.codec = att.codec;
    b.backbone = att.backbone;
    Rng readout_rng = derive_rng(merged.seed, {3});
    b.readout = make_readout(b.backbone->block_specs(), merged.d_tau, merged.lora_rank, merged.lora_scale,
                             merged.train_query_weights, merged.lambda, readout_rng);
    Rng encoder_rng = derive_rng(merged.seed, {4});
    b.encoder = TextEncoder::random(merged.d_tau, encoder_rng);
    Rng prompt_rng = derive_rng(merged.seed, {5});
    b.prompts = build_prompt_pair(merged.pos_attribute, merged.neg_attribute, merged.context_length, merged.d_tau,
                                  b.encoder.vocab, prompt_rng, merged.context_init_std);
    apply_runtime_switches(b);
    return b;
}

} // namespace liqa
