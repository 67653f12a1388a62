#pragma once

// Dataset manifests: a tab-separated file with a header line
//
//   # dataset: synthetic-blur
//   # mos_scale: 0 100
//   image_id<TAB>path<TAB>mos<TAB>split
//   img_0000<TAB>images/img_0000.ppm<TAB>73.3<TAB>train
//
// Relative paths resolve against the manifest's directory.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "error.hpp"

namespace liqa {

enum class Split { Train, Val, Test };

inline std::string to_string(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    }
    return "train";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    fail(ErrorKind::Parse, "unknown split '" + s + "'");
}

struct DatasetRecord {
    std::string image_id;
    std::string path;
    double mos = 0.0;
    Split split = Split::Train;

    friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

struct Manifest {
    std::string dataset = "unnamed";
    double mos_min = 0.0;
    double mos_max = 100.0;
    std::vector<DatasetRecord> records;
    std::filesystem::path base_dir;  // where relative paths resolve

    std::filesystem::path resolve(const DatasetRecord& r) const {
        const std::filesystem::path p(r.path);
        return p.is_absolute() ? p : base_dir / p;
    }

    Manifest subset(Split s) const {
        Manifest m = *this;
        m.records.clear();
        for (const DatasetRecord& r : records)
            if (r.split == s) m.records.push_back(r);
        return m;
    }

    std::vector<double> mos_values() const {
        std::vector<double> v;
        for (const DatasetRecord& r : records) v.push_back(r.mos);
        return v;
    }

    /// Unique ids, finite MOS within the declared scale.
    void validate() const {
        require(mos_max > mos_min, ErrorKind::Validation, "mos_scale must have max > min");
        std::set<std::string> seen;
        for (const DatasetRecord& r : records) {
            require(!r.image_id.empty(), ErrorKind::Validation, "empty image_id");
            require(seen.insert(r.image_id).second, ErrorKind::Validation, "duplicate image_id '" + r.image_id + "'");
            require(std::isfinite(r.mos) && r.mos >= mos_min && r.mos <= mos_max, ErrorKind::Validation,
                    "mos " + config_detail::from_double(r.mos) + " of '" + r.image_id + "' is outside the declared scale [" +
                        config_detail::from_double(mos_min) + ", " + config_detail::from_double(mos_max) + "]");
        }
    }
};

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return out;
}

inline Manifest parse_manifest(const std::string& text, const std::string& origin = "<manifest>") {
    Manifest m;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    bool header = false;
    const auto where = [&] { return origin + ":" + std::to_string(lineno) + ": "; };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (config_detail::trim(line).empty()) continue;
        if (line[0] == '#') {
            const std::string body = config_detail::trim(line.substr(1));
            const auto colon = body.find(':');
            if (colon == std::string::npos) continue;
            const std::string key = config_detail::trim(body.substr(0, colon));
            const std::string value = config_detail::trim(body.substr(colon + 1));
            if (key == "dataset") {
                m.dataset = value;
            } else if (key == "mos_scale") {
                std::istringstream vs(value);
                std::string a, b, extra;
                vs >> a >> b;
                require(!a.empty() && !b.empty() && !(vs >> extra), ErrorKind::Parse, where() + "mos_scale needs two numbers");
                try {
                    m.mos_min = config_detail::to_double("mos_scale", a);
                    m.mos_max = config_detail::to_double("mos_scale", b);
                } catch (const Error&) {
                    fail(ErrorKind::Parse, where() + "bad mos_scale '" + value + "'");
                }
            }
            continue;
        }
        const std::vector<std::string> cols = split_tabs(line);
        if (!header) {
            require(cols == std::vector<std::string>{"image_id", "path", "mos", "split"}, ErrorKind::Parse,
                    where() + "expected header 'image_id<TAB>path<TAB>mos<TAB>split'");
            header = true;
            continue;
        }
        require(cols.size() == 4, ErrorKind::Parse, where() + "expected 4 tab-separated fields, got " + std::to_string(cols.size()));
        DatasetRecord r;
        r.image_id = cols[0];
        r.path = cols[1];
        try {
            r.mos = config_detail::to_double("mos", cols[2]);
            r.split = parse_split(cols[3]);
        } catch (const Error& e) {
            fail(ErrorKind::Parse, where() + e.what());
        }
        m.records.push_back(std::move(r));
    }
    require(header, ErrorKind::Parse, origin + ": missing header line");
    m.validate();
    return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
    require(std::filesystem::exists(path), ErrorKind::Io, "manifest not found: " + path.string());
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    Manifest m = parse_manifest(ss.str(), path.string());
    m.base_dir = path.parent_path();
    return m;
}

inline std::string format_manifest(const Manifest& m) {
    std::ostringstream os;
    os << "# dataset: " << m.dataset << "\n";
    os << "# mos_scale: " << config_detail::from_double(m.mos_min) << " " << config_detail::from_double(m.mos_max) << "\n";
    os << "image_id\tpath\tmos\tsplit\n";
    for (const DatasetRecord& r : m.records)
        os << r.image_id << "\t" << r.path << "\t" << config_detail::from_double(r.mos) << "\t" << to_string(r.split) << "\n";
    return os.str();
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    m.validate();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    out << format_manifest(m);
    require(static_cast<bool>(out), ErrorKind::Io, "short write to " + path.string());
}

} // namespace liqa
