#include "elm/data.hpp"

#include <fstream>

#include "elm/error.hpp"
#include "elm/rng.hpp"

namespace elm {

namespace {

const char* kFillerWords[] = {
    "the",      "of",       "and",      "a",        "to",       "in",       "is",
    "was",      "he",       "for",      "it",       "with",     "as",       "his",
    "on",       "be",       "at",       "by",       "had",      "not",      "are",
    "but",      "from",     "or",       "have",     "an",       "they",     "which",
    "one",      "you",      "were",     "her",      "all",      "she",      "there",
    "would",    "their",    "we",       "him",      "been",     "has",      "when",
    "who",      "will",     "more",     "no",       "if",       "out",      "so",
    "said",     "what",     "up",       "its",      "about",    "into",     "than",
    "them",     "can",      "only",     "other",    "new",      "some",     "could",
    "time",     "these",    "two",      "may",      "then",     "do",       "first",
    "any",      "my",       "now",      "such",     "like",     "our",      "over",
    "man",      "me",       "even",     "most",     "made",     "after",    "also",
    "did",      "many",     "before",   "must",     "through",  "years",    "where",
    "much",     "way",      "well",     "down",     "should",   "because",  "each",
    "just",     "those",    "people",   "how",      "too",      "little",   "state",
    "good",     "very",     "make",     "world",    "still",    "own",      "see",
    "men",      "work",     "long",     "here",     "get",      "both",     "between",
    "life",     "being",    "under",    "never",    "day",      "same",     "another",
    "know",     "while",    "last",     "might",    "us",       "great",    "old",
    "year",     "off",      "come",     "since",    "against",  "go",       "came",
    "right",    "used",     "take",     "three",    "house",    "himself",  "few",
    "water",    "light",    "morning",  "evening",  "river",    "mountain", "garden",
    "window",   "road",     "winter",   "summer",   "letter",   "silence",  "voice",
    "shadow",   "stone",    "forest",   "harbor",   "village",  "journey",  "question",
    "answer",   "machine",  "engine",   "pattern",  "number",   "measure",  "balance",
    "memory",   "history",  "country",  "island",   "weather",  "certain",  "moment",
};
constexpr size_t kFillerWordCount = sizeof(kFillerWords) / sizeof(kFillerWords[0]);

} // namespace

std::vector<int32_t> load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open corpus file: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    std::vector<int32_t> out(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i)
        out[i] = static_cast<int32_t>(static_cast<unsigned char>(bytes[i]));
    return out;
}

std::vector<TokenBatch> make_windows(const std::vector<int32_t>& stream, int64_t window,
                                     int64_t batch_size) {
    if (window < 2) throw InputError("window length must be at least 2 tokens");
    if (batch_size < 1) throw InputError("batch size must be positive");
    const int64_t n_windows = static_cast<int64_t>(stream.size()) / window;
    if (n_windows < 1)
        throw InputError("stream of " + std::to_string(stream.size()) +
                         " tokens is shorter than one window of " + std::to_string(window));

    std::vector<TokenBatch> out;
    for (int64_t w0 = 0; w0 < n_windows; w0 += batch_size) {
        const int64_t rows = std::min(batch_size, n_windows - w0);
        TokenBatch tb;
        tb.batch = rows;
        tb.seq = window;
        tb.ids.resize(rows * window);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t t = 0; t < window; ++t)
                tb.ids[r * window + t] = stream[(w0 + r) * window + t];
        out.push_back(std::move(tb));
    }
    return out;
}

std::string synthetic_corpus(uint64_t min_bytes, uint64_t seed) {
    Rng rng(seed);
    std::string text;
    text.reserve(min_bytes + 256);
    while (text.size() < min_bytes) {
        const uint64_t sentences = 3 + rng.uniform_below(5);
        for (uint64_t s = 0; s < sentences; ++s) {
            const uint64_t words = 4 + rng.uniform_below(11);
            for (uint64_t i = 0; i < words; ++i) {
                // min of two uniforms skews toward the common head words
                const uint64_t a = rng.uniform_below(kFillerWordCount);
                const uint64_t b = rng.uniform_below(kFillerWordCount);
                std::string w = kFillerWords[a < b ? a : b];
                if (i == 0) w[0] = char(w[0] - 'a' + 'A');
                text += w;
                if (i + 1 < words) {
                    if (i > 1 && rng.uniform_below(12) == 0) text += ",";
                    text += " ";
                }
            }
            text += ". ";
        }
        text += "\n\n";
    }
    return text;
}

} // namespace elm
