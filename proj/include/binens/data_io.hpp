#pragma once

// Datasets, byte-level tokenization, deterministic synthetic tasks, and a
// token-perturbation augmentation stand-in.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "binens/errors.hpp"
#include "binens/rng.hpp"

namespace binens {

struct Example {
    int id = 0;
    std::string text;      // raw bytes
    int label = 0;
    int weight_slot = 0;   // index into the boosting sample-weight vector
};

enum class Split { train, dev };

struct Dataset {
    std::vector<Example> examples;
    int num_classes = 2;
    Split split = Split::train;
    // Known for synthetic tasks: the accuracy of the label-generating rule.
    std::optional<double> bayes_accuracy;

    int size() const { return static_cast<int>(examples.size()); }
};

// Byte-level tokens: each byte maps to byte+1, id 0 is the pad symbol.
constexpr int kPadToken = 0;
constexpr int kByteVocabSize = 257;

inline void tokenize(const std::string& text, int max_seq_len, std::vector<int>& ids, std::vector<int>& mask) {
    if (max_seq_len < 1) throw ConfigError("tokenize: max_seq_len must be >= 1");
    ids.assign(static_cast<std::size_t>(max_seq_len), kPadToken);
    mask.assign(static_cast<std::size_t>(max_seq_len), 0);
    const std::size_t n = std::min(text.size(), static_cast<std::size_t>(max_seq_len));
    for (std::size_t i = 0; i < n; ++i) {
        ids[i] = static_cast<int>(static_cast<unsigned char>(text[i])) + 1;
        mask[i] = 1;
    }
}

inline std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id == kPadToken) break;
        out.push_back(static_cast<char>(static_cast<unsigned char>(id - 1)));
    }
    return out;
}

// Token ids plus mask for a batch, row-major [batch, seq].
struct TokenBatch {
    std::vector<int> ids;
    std::vector<int> mask;
    int batch = 0;
    int seq = 0;
};

inline TokenBatch make_token_batch(const Dataset& ds, const std::vector<int>& indices, int max_seq_len) {
    TokenBatch b;
    b.batch = static_cast<int>(indices.size());
    b.seq = max_seq_len;
    b.ids.reserve(indices.size() * static_cast<std::size_t>(max_seq_len));
    b.mask.reserve(b.ids.capacity());
    std::vector<int> ids, mask;
    for (int idx : indices) {
        tokenize(ds.examples[static_cast<std::size_t>(idx)].text, max_seq_len, ids, mask);
        b.ids.insert(b.ids.end(), ids.begin(), ids.end());
        b.mask.insert(b.mask.end(), mask.begin(), mask.end());
    }
    return b;
}

// ---------------------------------------------------------------------------
// TSV delivery format: one example per line, "text<TAB>label".
// ---------------------------------------------------------------------------

inline Dataset load_tsv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_tsv: cannot open " + path);
    Dataset ds;
    std::string line;
    int line_no = 0;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError("load_tsv: " + path + ":" + std::to_string(line_no) + ": missing tab separator");
        if (line.find('\t', tab + 1) != std::string::npos)
            throw DataError("load_tsv: " + path + ":" + std::to_string(line_no) + ": more than one tab");
        const std::string label_str = line.substr(tab + 1);
        int label = 0;
        try {
            std::size_t pos = 0;
            label = std::stoi(label_str, &pos);
            if (pos != label_str.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw DataError("load_tsv: " + path + ":" + std::to_string(line_no) + ": unparseable label '" +
                            label_str + "'");
        }
        if (label < 0)
            throw DataError("load_tsv: " + path + ":" + std::to_string(line_no) + ": negative label");
        Example ex;
        ex.id = ds.size();
        ex.weight_slot = ex.id;
        ex.text = line.substr(0, tab);
        ex.label = label;
        max_label = std::max(max_label, label);
        ds.examples.push_back(std::move(ex));
    }
    if (ds.examples.empty()) throw DataError("load_tsv: " + path + ": empty dataset");
    ds.num_classes = std::max(2, max_label + 1);
    return ds;
}

inline void save_tsv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("save_tsv: cannot open " + path + " for writing");
    for (const auto& ex : ds.examples) out << ex.text << '\t' << ex.label << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic tasks. Labels are a known function of the text; a noise_rate
// fraction of labels is flipped to a different class, so the generating rule
// scores 1 - noise_rate (the task's Bayes accuracy).
// ---------------------------------------------------------------------------

enum class TaskKind { parity_of_marker, keyword_vs_keyword, majority_byte };

inline TaskKind task_kind_from_name(const std::string& s) {
    if (s == "parity-of-marker") return TaskKind::parity_of_marker;
    if (s == "keyword-vs-keyword") return TaskKind::keyword_vs_keyword;
    if (s == "majority-byte") return TaskKind::majority_byte;
    throw ConfigError("unknown synthetic task '" + s + "'");
}

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::parity_of_marker: return "parity-of-marker";
        case TaskKind::keyword_vs_keyword: return "keyword-vs-keyword";
        case TaskKind::majority_byte: return "majority-byte";
    }
    return "?";
}

namespace detail {

inline char filler_byte(Rng& rng) {
    // Lowercase letters excluding the marker byte 'x'.
    static const char pool[] = "abcdefghijklmnopqrstuvw";
    return pool[rng.uniform_int(sizeof(pool) - 1)];
}

inline std::string keyword_for_class(int k) {
    static const char* words[] = {"cat", "dog", "owl", "fox", "bee", "elk", "ant", "bat"};
    if (k < 8) return words[k];
    return std::string("k") + std::to_string(k);
}

}  // namespace detail

inline Dataset make_synthetic_task(TaskKind kind, int m, int K, std::uint64_t seed, double noise_rate,
                                   int min_len = 12, int max_len = 20) {
    if (m < 10) throw ConfigError("make_synthetic_task: m must be >= 10");
    if (K < 2) throw ConfigError("make_synthetic_task: K must be >= 2");
    if (noise_rate < 0.0 || noise_rate >= 0.5) throw ConfigError("make_synthetic_task: noise_rate must be in [0, 0.5)");
    if (kind == TaskKind::parity_of_marker && K != 2)
        throw ConfigError("make_synthetic_task: parity-of-marker is a binary task");
    if (min_len < 4 || max_len < min_len) throw ConfigError("make_synthetic_task: bad length range");

    Rng rng(seed);
    Dataset ds;
    ds.num_classes = K;
    ds.bayes_accuracy = 1.0 - noise_rate;
    ds.examples.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const int len = min_len + static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(max_len - min_len + 1)));
        std::string text;
        int label = 0;
        switch (kind) {
            case TaskKind::parity_of_marker: {
                text.resize(static_cast<std::size_t>(len));
                int markers = 0;
                for (auto& c : text) {
                    if (rng.uniform() < 0.25) {
                        c = 'x';
                        ++markers;
                    } else {
                        c = detail::filler_byte(rng);
                    }
                }
                label = markers % 2;
                break;
            }
            case TaskKind::keyword_vs_keyword: {
                label = static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(K)));
                const std::string kw = detail::keyword_for_class(label);
                text.resize(static_cast<std::size_t>(len));
                for (auto& c : text) c = detail::filler_byte(rng);
                const int pos =
                    static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(len - static_cast<int>(kw.size()) + 1)));
                for (std::size_t j = 0; j < kw.size(); ++j) text[static_cast<std::size_t>(pos) + j] = kw[j];
                break;
            }
            case TaskKind::majority_byte: {
                // Class bytes 'A'+k over a neutral filler; the most frequent
                // class byte decides the label, ties resolved by adding one more.
                std::vector<int> counts(static_cast<std::size_t>(K), 0);
                text.resize(static_cast<std::size_t>(len));
                for (auto& c : text) {
                    if (rng.uniform() < 0.5) {
                        const int k = static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(K)));
                        c = static_cast<char>('A' + k);
                        ++counts[static_cast<std::size_t>(k)];
                    } else {
                        c = detail::filler_byte(rng);
                    }
                }
                int best = 0;
                bool tie = false;
                for (int k = 1; k < K; ++k) {
                    if (counts[static_cast<std::size_t>(k)] > counts[static_cast<std::size_t>(best)]) {
                        best = k;
                        tie = false;
                    } else if (counts[static_cast<std::size_t>(k)] == counts[static_cast<std::size_t>(best)]) {
                        tie = true;
                    }
                }
                if (tie || counts[static_cast<std::size_t>(best)] == 0) {
                    best = static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(K)));
                    text[0] = static_cast<char>('A' + best);
                    text[1] = static_cast<char>('A' + best);
                }
                label = best;
                break;
            }
        }
        if (noise_rate > 0.0 && rng.uniform() < noise_rate) {
            const int shift = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(K - 1)));
            label = (label + shift) % K;
        }
        Example ex;
        ex.id = i;
        ex.weight_slot = i;
        ex.text = std::move(text);
        ex.label = label;
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

// DA stand-in: factor-1 perturbed copies per example (random byte substitution
// at rate 0.05, label preserved). Copies are appended after the originals.
inline Dataset augment(const Dataset& ds, int factor, std::uint64_t seed) {
    if (factor < 1) throw ConfigError("augment: factor must be >= 1");
    Dataset out = ds;
    if (factor == 1) return out;
    Rng rng(seed);
    for (const auto& ex : ds.examples) {
        for (int c = 0; c < factor - 1; ++c) {
            Example copy = ex;
            copy.id = out.size();
            copy.weight_slot = copy.id;
            for (auto& ch : copy.text)
                if (rng.uniform() < 0.05) ch = detail::filler_byte(rng);
            out.examples.push_back(std::move(copy));
        }
    }
    return out;
}

}  // namespace binens
