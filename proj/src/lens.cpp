#include "dg/lens.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "dg/error.hpp"

namespace dg {

std::vector<std::vector<LensToken>> lens_decode(const ModelView& model, std::span<const int> tokens, int k) {
    const auto V = static_cast<std::size_t>(model.arch.vocab_size);
    if (k < 1 || static_cast<std::size_t>(k) > V) throw InputError("lens: k must be in [1, vocab]");
    if (tokens.empty()) throw InputError("lens: empty input");
    auto trace = forward(model, tokens, true);
    const std::size_t T = tokens.size(), d = model.arch.d_model;
    std::vector<std::vector<LensToken>> out;
    std::vector<int> idx(V);
    for (const auto& h : trace.hidden_states) {
        Tensor logits = readout(model, h.ptr() + (T - 1) * d, 1);
        std::iota(idx.begin(), idx.end(), 0);
        auto better = [&](int a, int b) {
            return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)] ||
                   (logits[static_cast<std::size_t>(a)] == logits[static_cast<std::size_t>(b)] && a < b);
        };
        std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
        std::vector<LensToken> top;
        for (int r = 0; r < k; ++r) top.push_back({idx[static_cast<std::size_t>(r)], logits[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])]});
        out.push_back(std::move(top));
    }
    return out;
}

std::string token_text(int id) {
    switch (id) {
    case tok::kBos: return "<BOS>";
    case tok::kEos: return "<EOS>";
    case tok::kSepUser: return "<USER>";
    case tok::kSepAsst: return "<ASST>";
    default: break;
    }
    if (id >= 0x20 && id < 0x7f) return std::string(1, static_cast<char>(id));
    char buf[16];
    std::snprintf(buf, sizeof buf, "<0x%02X>", id);
    return buf;
}

LensHeatmap lens_accumulate(const ModelView& model, const std::vector<std::vector<int>>& dataset, int k) {
    if (dataset.empty()) throw InputError("lens: empty dataset");
    const std::size_t n_layers = static_cast<std::size_t>(model.arch.n_layers) + 1;
    std::vector<std::map<int, int>> counts(n_layers);
    for (const auto& ex : dataset) {
        auto dec = lens_decode(model, ex, k);
        for (std::size_t l = 0; l < n_layers; ++l)
            for (const auto& t : dec[l]) ++counts[l][t.token];
    }
    LensHeatmap h;
    h.k = k;
    for (std::size_t l = 0; l < n_layers; ++l) {
        h.layers.push_back(static_cast<int>(l));
        std::vector<std::pair<int, int>> ranked(counts[l].begin(), counts[l].end());
        std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.second > b.second; });
        std::vector<LensCell> row;
        for (int r = 0; r < k && static_cast<std::size_t>(r) < ranked.size(); ++r) {
            auto [tok, c] = ranked[static_cast<std::size_t>(r)];
            row.push_back({tok, token_text(tok), static_cast<float>(c) / static_cast<float>(dataset.size())});
        }
        h.cells.push_back(std::move(row));
    }
    return h;
}

double lens_similarity(const LensHeatmap& a, const LensHeatmap& b) {
    if (a.layers != b.layers || a.k != b.k || a.cells.size() != b.cells.size())
        throw InputError("lens: heatmaps have different layers or k");
    if (a.cells.empty()) throw InputError("lens: empty heatmap");
    double total = 0.0;
    for (std::size_t l = 0; l < a.cells.size(); ++l) {
        std::set<int> sa, sb;
        for (const auto& c : a.cells[l]) sa.insert(c.token);
        for (const auto& c : b.cells[l]) sb.insert(c.token);
        std::size_t inter = 0;
        for (int t : sa) inter += sb.count(t);
        std::size_t uni = sa.size() + sb.size() - inter;
        total += uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
    }
    return total / static_cast<double>(a.cells.size());
}

void to_json(nlohmann::json& j, const LensHeatmap& h) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& row : h.cells) {
        nlohmann::json r = nlohmann::json::array();
        for (const auto& c : row) r.push_back({{"token", c.token}, {"text", c.text}, {"frequency", c.frequency}});
        cells.push_back(std::move(r));
    }
    j = {{"layers", h.layers}, {"k", h.k}, {"cells", cells}};
}

void from_json(const nlohmann::json& j, LensHeatmap& h) {
    h.layers = j.at("layers").get<std::vector<int>>();
    h.k = j.at("k").get<int>();
    h.cells.clear();
    for (const auto& r : j.at("cells")) {
        std::vector<LensCell> row;
        for (const auto& c : r)
            row.push_back({c.at("token").get<int>(), c.at("text").get<std::string>(), c.at("frequency").get<float>()});
        h.cells.push_back(std::move(row));
    }
    if (h.cells.size() != h.layers.size()) throw InputError("lens: cells and layers differ in length");
}

namespace {
std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}
} // namespace

void export_heatmap(const LensHeatmap& h, const std::filesystem::path& json_path,
                    const std::filesystem::path& csv_path, const std::set<std::string>& lexicon) {
    {
        std::ofstream f(json_path);
        if (!f) throw IoError("cannot write " + json_path.string());
        f << nlohmann::json(h).dump(1) << "\n";
        if (!f) throw IoError("write failed: " + json_path.string());
    }
    std::ofstream f(csv_path);
    if (!f) throw IoError("cannot write " + csv_path.string());
    f << "layer,rank,token_id,token_text,frequency,negative\n";
    for (std::size_t l = 0; l < h.cells.size(); ++l)
        for (std::size_t r = 0; r < h.cells[l].size(); ++r) {
            const auto& c = h.cells[l][r];
            f << h.layers[l] << ',' << r << ',' << c.token << ',' << csv_quote(c.text) << ',' << c.frequency << ','
              << (lexicon.count(c.text) ? 1 : 0) << '\n';
        }
    if (!f) throw IoError("write failed: " + csv_path.string());
}

LensHeatmap load_heatmap(const std::filesystem::path& json_path) {
    std::ifstream f(json_path);
    if (!f) throw IoError("cannot read " + json_path.string());
    try {
        return nlohmann::json::parse(f).get<LensHeatmap>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("corrupt heatmap file: " + std::string(e.what()));
    }
}

std::set<std::string> load_lexicon(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path.string());
    try {
        auto v = nlohmann::json::parse(f).get<std::vector<std::string>>();
        return {v.begin(), v.end()};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("lexicon must be a JSON string array: " + std::string(e.what()));
    }
}

std::set<std::string> default_refusal_lexicon() { return {"I", "cannot", "Sorry"}; }

} // namespace dg
