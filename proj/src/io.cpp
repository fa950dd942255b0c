#include "i2mv/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace i2mv {

namespace {

using nlohmann::json;

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError("short write to " + path.string());
}

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Little-endian reads off a byte string with bounds checking.
struct Cursor {
    const std::string& buf;
    std::size_t at = 0;
    const char* what;

    void need(std::size_t n) const {
        if (at + n > buf.size()) {
            throw DataError(std::string(what) + ": truncated at byte " + std::to_string(at));
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 4;
        return v;
    }
    void raw(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, buf.data() + at, n);
        at += n;
    }
    void expect_magic(const char* magic, std::size_t n) {
        need(n);
        if (std::memcmp(buf.data() + at, magic, n) != 0) {
            throw DataError(std::string(what) + ": bad magic");
        }
        at += n;
    }
};

bool is_lower_token(const std::string& t) {
    return std::none_of(t.begin(), t.end(), [](unsigned char c) { return c >= 'A' && c <= 'Z'; });
}

double parse_double(std::string_view s, const std::string& where) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
        throw DataError(where + ": bad float '" + std::string(s) + "'");
    }
    return v;
}

}  // namespace

// ---- embeddings -------------------------------------------------------------

void EmbeddingTable::add(std::string token, Eigen::VectorXd v) {
    if (dim == 0) dim = v.size();
    index.emplace(token, tokens.size());
    tokens.push_back(std::move(token));
    vectors.push_back(std::move(v));
}

const Eigen::VectorXd& EmbeddingTable::vector_of(const std::string& token) const {
    auto it = index.find(token);
    if (it == index.end()) throw DataError("embedding table has no token '" + token + "'");
    return vectors[it->second];
}

EmbeddingTable load_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open embeddings file " + path.string());

    EmbeddingTable table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            throw DataError(path.string() + ": empty line " + std::to_string(line_no));
        }
        std::istringstream ss(line);
        std::string token;
        ss >> token;
        if (!is_lower_token(token)) {
            throw DataError(path.string() + ": token '" + token + "' at line " +
                            std::to_string(line_no) + " is not lowercase");
        }
        std::vector<double> vals;
        std::string field;
        while (ss >> field)
            vals.push_back(parse_double(field, path.string() + ":" + std::to_string(line_no)));
        if (vals.empty()) {
            throw DataError(path.string() + ": token '" + token + "' at line " +
                            std::to_string(line_no) + " has no values");
        }
        if (table.dim != 0 && static_cast<Index>(vals.size()) != table.dim) {
            throw DataError(path.string() + ": dimension mismatch at line " +
                            std::to_string(line_no) + " (expected " + std::to_string(table.dim) +
                            ", got " + std::to_string(vals.size()) + ")");
        }
        if (table.contains(token)) {
            throw DataError(path.string() + ": duplicate token '" + token + "' at line " +
                            std::to_string(line_no));
        }
        table.add(std::move(token),
                  Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<Index>(vals.size())));
    }
    if (table.size() == 0) throw DataError(path.string() + ": empty embedding table");
    return table;
}

void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
    std::string out;
    char buf[64];
    for (std::size_t i = 0; i < table.tokens.size(); ++i) {
        out += table.tokens[i];
        for (Index j = 0; j < table.vectors[i].size(); ++j) {
            std::snprintf(buf, sizeof buf, " %.9g", table.vectors[i](j));
            out += buf;
        }
        out += '\n';
    }
    write_file(path, out);
}

// ---- view corpus ----------------------------------------------------------------

Split parse_split(const std::string& s) {
    if (s == "seen") return Split::seen;
    if (s == "val") return Split::val;
    if (s == "unseen") return Split::unseen;
    throw DataError("unknown split '" + s + "' (expected seen|val|unseen)");
}

std::string split_name(Split s) {
    switch (s) {
        case Split::seen: return "seen";
        case Split::val: return "val";
        case Split::unseen: return "unseen";
    }
    return "?";
}

const ClassViews* ViewCorpus::find(const std::string& name) const {
    for (const auto& c : classes)
        if (c.name == name) return &c;
    return nullptr;
}

std::vector<std::size_t> ViewCorpus::indices_of(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < classes.size(); ++i)
        if (classes[i].split == split) out.push_back(i);
    return out;
}

void ViewCorpus::validate(bool allow_ragged_views) const {
    if (classes.empty()) throw DataError("view corpus has no classes");
    std::set<std::string> names;
    std::size_t q0 = classes.front().views.size();
    for (const auto& c : classes) {
        if (c.name.empty()) throw DataError("view corpus has a class with an empty name");
        if (!names.insert(c.name).second) {
            throw DataError("class '" + c.name +
                            "' appears more than once; seen and unseen sets must stay disjoint");
        }
        if (c.views.empty()) throw DataError("class '" + c.name + "' has no views");
        for (const auto& v : c.views)
            if (v.empty()) throw DataError("class '" + c.name + "' has an empty view");
        if (!c.source_tags.empty() && c.source_tags.size() != c.views.size()) {
            throw DataError("class '" + c.name + "' has " + std::to_string(c.source_tags.size()) +
                            " source tags for " + std::to_string(c.views.size()) + " views");
        }
        if (!allow_ragged_views && c.views.size() != q0) {
            throw DataError("class '" + c.name + "' has " + std::to_string(c.views.size()) +
                            " views but '" + classes.front().name + "' has " + std::to_string(q0) +
                            "; pass allow_ragged_views to permit this");
        }
    }
}

ViewCorpus load_views(const std::filesystem::path& path, bool allow_ragged_views) {
    json j = load_json_file(path);
    if (!j.is_object() || !j.contains("classes") || !j["classes"].is_array()) {
        throw DataError(path.string() + ": expected top-level object with a 'classes' array");
    }
    ViewCorpus corpus;
    try {
        for (const auto& jc : j["classes"]) {
            ClassViews c;
            if (!jc.contains("name") || !jc["name"].is_string()) {
                throw DataError(path.string() + ": class entry without a string 'name'");
            }
            c.name = jc["name"].get<std::string>();
            if (!jc.contains("split")) {
                throw DataError(path.string() + ": class '" + c.name + "' is missing 'split'");
            }
            c.split = parse_split(jc["split"].get<std::string>());
            if (!jc.contains("views") || !jc["views"].is_array()) {
                throw DataError(path.string() + ": class '" + c.name + "' is missing 'views'");
            }
            for (const auto& v : jc["views"]) c.views.push_back(v.get<std::string>());
            if (jc.contains("source_tags")) {
                for (const auto& t : jc["source_tags"])
                    c.source_tags.push_back(t.get<std::string>());
            }
            corpus.classes.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    corpus.validate(allow_ragged_views);
    return corpus;
}

void save_views(const ViewCorpus& corpus, const std::filesystem::path& path) {
    json out;
    out["classes"] = json::array();
    for (const auto& c : corpus.classes) {
        json jc;
        jc["name"] = c.name;
        jc["split"] = split_name(c.split);
        jc["views"] = c.views;
        if (!c.source_tags.empty()) jc["source_tags"] = c.source_tags;
        out["classes"].push_back(std::move(jc));
    }
    save_json_file(out, path);
}

// ---- features ----------------------------------------------------------------------

std::filesystem::path labels_path_for(const std::filesystem::path& features_path) {
    std::filesystem::path p = features_path;
    p.replace_extension(".labels");
    return p;
}

FeatureFile load_features(const std::filesystem::path& path) {
    const std::string buf = read_file(path);
    Cursor cur{buf, 0, "feature file"};
    cur.expect_magic("I2MV", 4);
    const std::uint32_t version = cur.u32();
    if (version != 1) {
        throw DataError(path.string() + ": unsupported feature-file version " +
                        std::to_string(version));
    }
    const std::uint64_t count = cur.u32();
    const std::uint64_t n = cur.u32();
    const std::uint64_t d = cur.u32();
    if (n < 1 || d < 1) {
        throw DataError(path.string() + ": invalid header (N=" + std::to_string(n) +
                        ", d=" + std::to_string(d) + ")");
    }
    const std::uint64_t values = count * (n + 1) * d;
    const std::uint64_t payload = values * 4;
    if (payload / 4 != values || buf.size() - cur.at != payload) {
        throw DataError(path.string() + ": payload size mismatch (header promises " +
                        std::to_string(payload) + " bytes, file holds " +
                        std::to_string(buf.size() - cur.at) + ")");
    }

    std::ifstream labels_in(labels_path_for(path));
    if (!labels_in) {
        throw DataError("missing labels manifest " + labels_path_for(path).string());
    }
    std::vector<std::string> labels;
    std::string line;
    while (std::getline(labels_in, line)) labels.push_back(line);
    if (labels.size() != count) {
        throw DataError(labels_path_for(path).string() + ": " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(count) + " records");
    }

    FeatureFile file;
    file.patches = static_cast<Index>(n);
    file.dim = static_cast<Index>(d);
    file.records.reserve(count);
    std::vector<float> scratch((n + 1) * d);
    for (std::uint64_t r = 0; r < count; ++r) {
        cur.raw(scratch.data(), scratch.size() * 4);
        PatchFeatureRecord rec;
        if (labels[r].empty()) {
            throw DataError(labels_path_for(path).string() + ": empty label at record " +
                            std::to_string(r));
        }
        rec.class_name = labels[r];
        rec.features.resize(static_cast<Index>(n + 1), static_cast<Index>(d));
        for (std::size_t i = 0; i < scratch.size(); ++i) {
            const double v = static_cast<double>(scratch[i]);
            if (!std::isfinite(v)) {
                throw DataError(path.string() + ": non-finite feature value in record " +
                                std::to_string(r));
            }
            rec.features.data()[i] = v;
        }
        file.records.push_back(std::move(rec));
    }
    return file;
}

void save_features(const FeatureFile& file, const std::filesystem::path& path) {
    for (const auto& rec : file.records) {
        if (rec.features.rows() != file.patches + 1 || rec.features.cols() != file.dim) {
            throw DataError("record '" + rec.class_name + "' has shape " +
                            std::to_string(rec.features.rows()) + "x" +
                            std::to_string(rec.features.cols()) + ", expected " +
                            std::to_string(file.patches + 1) + "x" + std::to_string(file.dim));
        }
    }
    std::string buf = "I2MV";
    put_u32(buf, 1);
    put_u32(buf, static_cast<std::uint32_t>(file.records.size()));
    put_u32(buf, static_cast<std::uint32_t>(file.patches));
    put_u32(buf, static_cast<std::uint32_t>(file.dim));
    for (const auto& rec : file.records) {
        for (Index i = 0; i < rec.features.size(); ++i) {
            const float f = static_cast<float>(rec.features.data()[i]);
            char tmp[4];
            std::memcpy(tmp, &f, 4);
            buf.append(tmp, 4);
        }
    }
    write_file(path, buf);

    std::string labels;
    for (const auto& rec : file.records) {
        labels += rec.class_name;
        labels += '\n';
    }
    write_file(labels_path_for(path), labels);
}

// ---- checkpoints ----------------------------------------------------------------------

void save_checkpoint(const std::vector<std::pair<std::string, Tensor>>& named_params,
                     const nlohmann::json& config, const std::filesystem::path& path) {
    std::set<std::string> names;
    for (const auto& [name, t] : named_params) {
        if (!names.insert(name).second) {
            throw DataError("duplicate parameter name '" + name + "' in checkpoint");
        }
    }
    // Blob order follows the sorted index so offsets and payload stay in sync.
    std::vector<std::pair<std::string, Tensor>> sorted(named_params.begin(), named_params.end());
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    json index;
    index["config"] = config;
    json jt = json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : sorted) {
        json entry;
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        jt[name] = std::move(entry);
        offset += static_cast<std::uint64_t>(t.numel()) * 8;
    }
    index["tensors"] = std::move(jt);
    const std::string index_str = index.dump();

    std::string buf = "I2MVCKPT";
    put_u32(buf, 1);
    put_u32(buf, static_cast<std::uint32_t>(index_str.size()));
    buf += index_str;
    for (const auto& [name, t] : sorted) {
        const std::size_t at = buf.size();
        buf.resize(at + static_cast<std::size_t>(t.numel()) * 8);
        std::memcpy(buf.data() + at, t.data(), static_cast<std::size_t>(t.numel()) * 8);
    }
    write_file(path, buf);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string buf = read_file(path);
    Cursor cur{buf, 0, "checkpoint"};
    cur.expect_magic("I2MVCKPT", 8);
    const std::uint32_t version = cur.u32();
    if (version != 1) {
        throw DataError(path.string() + ": unsupported checkpoint version " +
                        std::to_string(version));
    }
    const std::uint32_t index_len = cur.u32();
    cur.need(index_len);
    json index;
    try {
        index = json::parse(buf.substr(cur.at, index_len));
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": bad checkpoint index: " + e.what());
    }
    cur.at += index_len;
    if (!index.is_object() || !index.contains("config") || !index.contains("tensors") ||
        !index["tensors"].is_object()) {
        throw DataError(path.string() + ": checkpoint index missing config/tensors");
    }

    const std::size_t blob_offset = cur.at;
    const std::size_t blob_len = buf.size() - blob_offset;
    Checkpoint ckpt;
    ckpt.config = index["config"];
    std::uint64_t expected_len = 0;
    try {
        for (const auto& [name, entry] : index["tensors"].items()) {
            if (!entry.contains("shape") || !entry.contains("offset")) {
                throw DataError(path.string() + ": tensor '" + name + "' missing shape/offset");
            }
            std::vector<Index> shape = entry["shape"].get<std::vector<Index>>();
            Index numel = 1;
            for (Index dim : shape) {
                if (dim <= 0 || numel > (1 << 28) / std::max<Index>(dim, 1)) {
                    throw DataError(path.string() + ": tensor '" + name + "' has bad shape");
                }
                numel *= dim;
            }
            const std::uint64_t offset = entry["offset"].get<std::uint64_t>();
            const std::uint64_t bytes = static_cast<std::uint64_t>(numel) * 8;
            if (offset > blob_len || offset + bytes > blob_len) {
                throw DataError(path.string() + ": tensor '" + name + "' overruns the value blob");
            }
            Tensor t = Tensor::zeros(shape);
            std::memcpy(t.data(), buf.data() + blob_offset + offset, bytes);
            ckpt.tensors.emplace_back(name, std::move(t));
            expected_len = std::max(expected_len, offset + bytes);
        }
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": bad checkpoint index: " + e.what());
    }
    if (expected_len != blob_len) {
        throw DataError(path.string() + ": index covers " + std::to_string(expected_len) +
                        " blob bytes but file holds " + std::to_string(blob_len));
    }
    return ckpt;
}

// ---- json helpers ------------------------------------------------------------------------

nlohmann::json load_json_file(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

void save_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
    write_file(path, j.dump(2) + "\n");
}

}  // namespace i2mv
