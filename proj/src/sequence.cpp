#include "rflow/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace rflow {

namespace {

const std::vector<std::string>& builtin_words() {
    static const std::vector<std::string> words = [] {
        std::vector<std::string> w = {
            "red", "green", "blue", "yellow", "magenta", "cyan",
            "square", "disk", "cross", "ring",
            "left", "right", "center",
            "plain", "striped",
        };
        for (int k = 1; k <= kMaxConditions; ++k) w.push_back("ref#" + std::to_string(k));
        return w;
    }();
    return words;
}

}  // namespace

Vocab Vocab::builtin() { return from_words(builtin_words()); }

Vocab Vocab::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary file: " + path);
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) words.push_back(line);
    }
    return from_words(std::move(words));
}

Vocab Vocab::from_words(std::vector<std::string> words) {
    Vocab v;
    v.words_ = std::move(words);
    for (size_t i = 0; i < v.words_.size(); ++i) {
        if (!v.index_.emplace(v.words_[i], static_cast<int>(i)).second)
            throw std::runtime_error("duplicate vocabulary word: " + v.words_[i]);
    }
    return v;
}

int Vocab::id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw std::out_of_range("unknown word: " + word);
    return it->second;
}

const std::string& Vocab::word(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("word id out of range");
    return words_[static_cast<size_t>(id)];
}

int Vocab::placeholder_condition(int id) const {
    const std::string& w = word(id);
    if (w.rfind("ref#", 0) != 0) return -1;
    int n = std::stoi(w.substr(4));
    return n - 1;
}

int Vocab::placeholder_id(int condition) const { return id("ref#" + std::to_string(condition + 1)); }

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

void PromptSpec::validate(const Vocab& vocab) const {
    std::set<int> seen;
    bool any = false;
    for (int id : word_ids) {
        if (id < 0 || id >= vocab.size()) throw std::out_of_range("prompt word id out of range");
        if (vocab.is_placeholder(id)) {
            any = true;
            if (!seen.insert(id).second) throw std::invalid_argument("placeholder used more than once");
        }
    }
    if (any != has_placeholders) throw std::invalid_argument("has_placeholders flag inconsistent with prompt content");
}

Span TokenSequence::cond_range(int k) const {
    if (k < 0 || k >= num_conditions()) throw std::out_of_range("condition index out of range");
    int begin = text_len + noisy_grid.count();
    for (int i = 0; i < k; ++i) {
        // count surviving tokens of group i (dropping may have removed some)
        begin += static_cast<int>(std::count_if(tags.begin(), tags.end(), [&](const SegmentTag& t) {
            return t.kind == SegmentTag::Cond && t.cond_index == i;
        }));
    }
    int len = static_cast<int>(std::count_if(tags.begin(), tags.end(), [&](const SegmentTag& t) {
        return t.kind == SegmentTag::Cond && t.cond_index == k;
    }));
    return {begin, begin + len};
}

void TokenSequence::validate() const {
    const int L = length();
    if (tokens.rank() != 2 || tokens.dim(0) != L || static_cast<int>(positions.size()) != L)
        throw std::runtime_error("token sequence: inconsistent lengths");

    // contiguous blocks in order text, noisy, cond(0..n-1)
    int phase = -1;
    for (const auto& tag : tags) {
        int p = tag.kind == SegmentTag::Text ? 0 : tag.kind == SegmentTag::Noisy ? 1 : 2 + tag.cond_index;
        if (p < phase) throw std::runtime_error("token sequence: blocks out of order");
        phase = p;
    }

    std::set<std::tuple<int, int, int>> unique;
    for (const auto& p : positions)
        if (!unique.insert({p.axis0, p.row, p.col}).second) throw std::runtime_error("token sequence: duplicate position");

    for (const auto& [k, span] : placeholder_spans) {
        if (span.begin < 0 || span.end > text_len || span.len() <= 0)
            throw std::runtime_error("token sequence: placeholder span outside text block");
        if (k < 0 || k >= num_conditions() || cond_len(k) == 0)
            throw std::runtime_error("token sequence: placeholder refers to a missing condition");
    }
}

Tensor patchify(const Tensor& image, int patch) {
    if (image.rank() != 3) throw std::invalid_argument("patchify: expected [C,H,W]");
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (patch <= 0 || H % patch != 0 || W % patch != 0)
        throw std::invalid_argument("patchify: image dimensions not divisible by patch size");
    const int gh = H / patch, gw = W / patch;
    const int token_dim = C * patch * patch;
    Tensor out = Tensor::zeros({gh * gw, token_dim});
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc) {
            double* row = out.ptr() + static_cast<int64_t>(pr * gw + pc) * token_dim;
            for (int c = 0; c < C; ++c)
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        row[(c * patch + dy) * patch + dx] =
                            image[int64_t(c) * H * W + int64_t(pr * patch + dy) * W + (pc * patch + dx)];
        }
    return out;
}

Tensor unpatchify(const Tensor& tokens, int channels, int height, int width, int patch) {
    const int gh = height / patch, gw = width / patch;
    const int token_dim = channels * patch * patch;
    if (tokens.rank() != 2 || tokens.dim(0) != gh * gw || tokens.dim(1) != token_dim ||
        height % patch != 0 || width % patch != 0)
        throw std::invalid_argument("unpatchify: shape mismatch");
    Tensor out = Tensor::zeros({channels, height, width});
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc) {
            const double* row = tokens.ptr() + static_cast<int64_t>(pr * gw + pc) * token_dim;
            for (int c = 0; c < channels; ++c)
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        out[int64_t(c) * height * width + int64_t(pr * patch + dy) * width + (pc * patch + dx)] =
                            row[(c * patch + dy) * patch + dx];
        }
    return out;
}

std::vector<Pos3> assign_positions(int text_len, Grid noisy, const std::vector<Grid>& conds) {
    if (static_cast<int>(conds.size()) > kMaxConditions)
        throw std::invalid_argument("assign_positions: too many condition groups");
    for (const auto& g : conds)
        if (g.rows > noisy.rows || g.cols > noisy.cols)
            throw std::invalid_argument("assign_positions: condition grid exceeds the noisy grid (position overflow)");
    std::vector<Pos3> pos;
    pos.reserve(static_cast<size_t>(text_len + noisy.count()));
    for (int j = 0; j < text_len; ++j) pos.push_back({0, 0, j});
    for (int r = 0; r < noisy.rows; ++r)
        for (int c = 0; c < noisy.cols; ++c) pos.push_back({1, r, c});
    for (size_t k = 0; k < conds.size(); ++k) {
        const int dr = static_cast<int>(k + 1) * noisy.rows;
        const int dc = static_cast<int>(k + 1) * noisy.cols;
        for (int r = 0; r < conds[k].rows; ++r)
            for (int c = 0; c < conds[k].cols; ++c) pos.push_back({1, r + dr, c + dc});
    }
    return pos;
}

EncodedPrompt encode_prompt(const PromptSpec& prompt, const Tensor& embed_table, const Vocab& vocab) {
    prompt.validate(vocab);
    if (embed_table.rank() != 2 || embed_table.dim(0) < vocab.size())
        throw std::invalid_argument("encode_prompt: embedding table too small for the vocabulary");
    EncodedPrompt out;
    out.tokens = embedding_lookup(embed_table, prompt.word_ids);
    for (size_t j = 0; j < prompt.word_ids.size(); ++j) {
        int k = vocab.placeholder_condition(prompt.word_ids[j]);
        if (k >= 0) out.spans[k] = Span{static_cast<int>(j), static_cast<int>(j) + 1};
    }
    return out;
}

TokenSequence compose_sequence(const EncodedPrompt& prompt, const Tensor& noisy_tokens, Grid noisy_grid,
                               const std::vector<Tensor>& cond_tokens, const std::vector<Grid>& cond_grids) {
    if (cond_tokens.size() != cond_grids.size()) throw std::invalid_argument("compose_sequence: group count mismatch");
    if (noisy_tokens.rank() != 2 || noisy_tokens.dim(0) != noisy_grid.count())
        throw std::invalid_argument("compose_sequence: noisy token count does not match grid");
    for (size_t k = 0; k < cond_tokens.size(); ++k)
        if (cond_tokens[k].rank() != 2 || cond_tokens[k].dim(0) != cond_grids[k].count() || cond_grids[k].count() == 0)
            throw std::invalid_argument("compose_sequence: condition token count does not match grid");

    TokenSequence seq;
    seq.text_len = prompt.tokens.dim(0);
    seq.noisy_grid = noisy_grid;
    seq.cond_grids = cond_grids;
    seq.placeholder_spans = prompt.spans;

    std::vector<Tensor> parts = {prompt.tokens, noisy_tokens};
    parts.insert(parts.end(), cond_tokens.begin(), cond_tokens.end());
    seq.tokens = concat(parts, 0);

    seq.tags.assign(static_cast<size_t>(seq.text_len), SegmentTag{SegmentTag::Text, -1});
    seq.tags.insert(seq.tags.end(), static_cast<size_t>(noisy_grid.count()), SegmentTag{SegmentTag::Noisy, -1});
    for (size_t k = 0; k < cond_grids.size(); ++k)
        seq.tags.insert(seq.tags.end(), static_cast<size_t>(cond_grids[k].count()),
                        SegmentTag{SegmentTag::Cond, static_cast<int>(k)});

    seq.positions = assign_positions(seq.text_len, noisy_grid, cond_grids);
    seq.validate();
    return seq;
}

TokenSequence drop_condition_tokens(const TokenSequence& seq, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("drop_condition_tokens: rate must be in [0,1)");
    if (rate == 0.0 || seq.num_conditions() == 0) return seq;

    std::vector<int> kept;
    kept.reserve(seq.tags.size());
    const int fixed = seq.text_len + seq.noisy_grid.count();
    for (int i = 0; i < fixed; ++i) kept.push_back(i);
    for (int k = 0; k < seq.num_conditions(); ++k) {
        Span r = seq.cond_range(k);
        const int n = r.len();
        const int keep = std::max(1, static_cast<int>(std::ceil((1.0 - rate) * n)));
        for (int idx : rng.sample_without_replacement(n, keep)) kept.push_back(r.begin + idx);
    }

    TokenSequence out;
    out.tokens = gather_rows(seq.tokens, kept);
    out.tags.reserve(kept.size());
    out.positions.reserve(kept.size());
    for (int i : kept) {
        out.tags.push_back(seq.tags[static_cast<size_t>(i)]);
        out.positions.push_back(seq.positions[static_cast<size_t>(i)]);
    }
    out.placeholder_spans = seq.placeholder_spans;
    out.text_len = seq.text_len;
    out.noisy_grid = seq.noisy_grid;
    out.cond_grids = seq.cond_grids;
    out.validate();
    return out;
}

}  // namespace rflow
