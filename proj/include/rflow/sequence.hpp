#pragma once

#include <map>
#include <string>
#include <vector>

#include "rflow/rng.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

constexpr int kMaxConditions = 10;

// 3-axis integer position: axis0 separates the text branch (0) from the
// image-like branches (1); row/col span the token grids.
struct Pos3 {
    int axis0 = 0;
    int row = 0;
    int col = 0;
    auto operator<=>(const Pos3&) const = default;
};

struct SegmentTag {
    enum Kind { Text, Noisy, Cond };
    Kind kind = Text;
    int cond_index = -1;  // only meaningful for Cond, in [0, kMaxConditions)
    bool operator==(const SegmentTag&) const = default;
};

struct Grid {
    int rows = 0;
    int cols = 0;
    int count() const { return rows * cols; }
};

struct Span {
    int begin = 0;
    int end = 0;
    int len() const { return end - begin; }
};

// Fixed toy vocabulary; word index equals line number when loaded from file.
class Vocab {
public:
    static Vocab builtin();
    static Vocab from_file(const std::string& path);
    static Vocab from_words(std::vector<std::string> words);

    int id(const std::string& word) const;
    const std::string& word(int id) const;
    int size() const { return static_cast<int>(words_.size()); }

    bool is_placeholder(int id) const { return placeholder_condition(id) >= 0; }
    // Condition index k for the word "ref#<k+1>", or -1.
    int placeholder_condition(int id) const;
    int placeholder_id(int condition) const;

    std::string decode(const std::vector<int>& ids) const;

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
};

struct PromptSpec {
    std::vector<int> word_ids;
    bool has_placeholders = false;

    void validate(const Vocab& vocab) const;
};

// Unified token sequence: contiguous blocks in the order
// text, noisy, cond(0), ..., cond(n-1).
struct TokenSequence {
    Tensor tokens;  // [L, token_dim]
    std::vector<SegmentTag> tags;
    std::vector<Pos3> positions;
    std::map<int, Span> placeholder_spans;  // condition index -> text span
    int text_len = 0;
    Grid noisy_grid;
    std::vector<Grid> cond_grids;  // layout grids before any token dropping

    int length() const { return static_cast<int>(tags.size()); }
    Span text_range() const { return {0, text_len}; }
    Span noisy_range() const { return {text_len, text_len + noisy_grid.count()}; }
    Span cond_range(int k) const;
    int cond_len(int k) const { return cond_range(k).len(); }
    int num_conditions() const { return static_cast<int>(cond_grids.size()); }

    void validate() const;
};

// [C,H,W] image -> [(H/p)*(W/p), C*p*p] tokens, patches in row-major order,
// features channel-major then row-major within the patch. Value-level only.
Tensor patchify(const Tensor& image, int patch);
Tensor unpatchify(const Tensor& tokens, int channels, int height, int width, int patch);

// Non-overlapping positions: text (0,0,j); noisy (1,r,c) over its grid;
// condition k offset by (k+1) noisy-grid strides along the diagonal.
// Condition grids may not exceed the noisy grid.
std::vector<Pos3> assign_positions(int text_len, Grid noisy, const std::vector<Grid>& conds);

struct EncodedPrompt {
    Tensor tokens;  // [n_words, token_dim]
    std::map<int, Span> spans;
};

EncodedPrompt encode_prompt(const PromptSpec& prompt, const Tensor& embed_table, const Vocab& vocab);

TokenSequence compose_sequence(const EncodedPrompt& prompt, const Tensor& noisy_tokens, Grid noisy_grid,
                               const std::vector<Tensor>& cond_tokens, const std::vector<Grid>& cond_grids);

// Keeps ceil((1-rate)*n_k) tokens (at least one) per condition group, chosen
// uniformly without replacement; text and noisy tokens are untouched and
// surviving tokens keep their tags and positions.
TokenSequence drop_condition_tokens(const TokenSequence& seq, double rate, Rng& rng);

}  // namespace rflow
