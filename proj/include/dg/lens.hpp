#pragma once

// Logit lens: read each layer's residual stream at the last position through
// the final norm and unembedding, and aggregate per-layer top-k tokens over a
// dataset into a heatmap.

#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dg/model.hpp"

namespace dg {

struct LensToken {
    int token = 0;
    float logit = 0.0f;
};

/// Entry l holds the top-k of layer l (0 = embedding output, n_layers = final),
/// sorted by logit descending with ties to the lower id.
std::vector<std::vector<LensToken>> lens_decode(const ModelView& model, std::span<const int> tokens, int k);

struct LensCell {
    int token = 0;
    std::string text;
    float frequency = 0.0f;

    friend bool operator==(const LensCell&, const LensCell&) = default;
};

struct LensHeatmap {
    std::vector<int> layers;
    int k = 0;
    std::vector<std::vector<LensCell>> cells; // [layer][rank]

    friend bool operator==(const LensHeatmap&, const LensHeatmap&) = default;
};

/// Printable form of a token: the byte itself, "<BOS>"-style names for
/// specials, or "<0xNN>" for non-printable bytes.
std::string token_text(int id);

/// Cell (l, r) is the r-th most frequent token in layer l's top-k sets, with
/// frequency = count / dataset size; ties go to the lower token id.
LensHeatmap lens_accumulate(const ModelView& model, const std::vector<std::vector<int>>& dataset, int k);

/// Mean over layers of the Jaccard overlap of the two heatmaps' token sets.
double lens_similarity(const LensHeatmap& a, const LensHeatmap& b);

void to_json(nlohmann::json& j, const LensHeatmap& h);
void from_json(const nlohmann::json& j, LensHeatmap& h);

/// Writes the full structure as JSON and a CSV with columns
/// layer,rank,token_id,token_text,frequency,negative, where `negative` marks
/// tokens whose text is in the lexicon.
void export_heatmap(const LensHeatmap& h, const std::filesystem::path& json_path,
                    const std::filesystem::path& csv_path, const std::set<std::string>& lexicon);
LensHeatmap load_heatmap(const std::filesystem::path& json_path);

/// JSON string array.
std::set<std::string> load_lexicon(const std::filesystem::path& path);
std::set<std::string> default_refusal_lexicon();

} // namespace dg
