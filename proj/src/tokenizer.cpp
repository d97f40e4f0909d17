#include "clamp/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <climits>
#include <fstream>
#include <regex>
#include <set>

#include "clamp/errors.hpp"

namespace clamp {

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::string utf8(int cp) {
    std::string out;
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return out;
}

// GPT-2 style reversible byte -> printable unicode table, in CLIP's order.
std::vector<std::pair<int, int>> bytes_to_unicode() {
    std::vector<int> bs;
    for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
    for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
    for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
    std::vector<int> cs = bs;
    int n = 0;
    for (int b = 0; b < 256; ++b) {
        if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
            bs.push_back(b);
            cs.push_back(256 + n++);
        }
    }
    std::vector<std::pair<int, int>> out;
    for (std::size_t i = 0; i < bs.size(); ++i) out.emplace_back(bs[i], cs[i]);
    return out;
}

// Splits a UTF-8 string into code-point substrings.
std::vector<std::string> utf8_chars(const std::string& s) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < s.size();) {
        const auto c = static_cast<unsigned char>(s[i]);
        const std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : 4;
        out.push_back(s.substr(i, len));
        i += len;
    }
    return out;
}

}  // namespace

WordTokenizer::WordTokenizer(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
        words_[i] = lower(words_[i]);
        if (words_[i].empty()) throw PreconditionError("word vocabulary contains an empty entry");
        if (!index_.emplace(words_[i], static_cast<int>(i)).second) {
            throw PreconditionError("word vocabulary repeats '" + words_[i] + "'");
        }
    }
}

WordTokenizer WordTokenizer::builtin() {
    return WordTokenizer({"a",      "an",     "the",    "of",     "left",    "right",  "front",   "back",
                          "hind",   "fore",   "upper",  "lower",  "middle",  "center", "top",     "bottom",
                          "eye",    "ear",    "nose",   "mouth",  "chin",    "jaw",    "head",    "face",
                          "neck",   "throat", "withers", "spine", "chest",   "belly",  "body",    "torso",
                          "tail",   "root",   "base",   "tip",    "end",     "shoulder", "elbow", "wrist",
                          "hand",   "knee",   "ankle",  "hip",    "leg",     "foot",   "paw",     "hoof",
                          "claw",   "toe",    "wing",   "beak",   "horn",    "antler", "joint",   "point",
                          "blob",   "keypoint", "animal", "one",  "two",     "three",  "four",    "five",
                          "six",    "seven",  "eight",  "nine",   "ten",     "red",    "green",   "blue",
                          "yellow", "white",  "black",  "0",      "1",       "2",      "3",       "4",
                          "5",      "6",      "7",      "8",      "9"});
}

WordTokenizer WordTokenizer::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open vocabulary file " + path.string());
    std::vector<std::string> words;
    for (std::string line; std::getline(in, line);) {
        while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
        if (!line.empty()) words.push_back(line);
    }
    return WordTokenizer(std::move(words));
}

std::vector<int> WordTokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        auto it = index_.find(word);
        if (it == index_.end()) throw InputError("no token for word '" + word + "' in '" + text + "'");
        ids.push_back(it->second);
        word.clear();
    };
    for (char ch : lower(text)) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            word += ch;
        } else {
            flush();
        }
    }
    flush();
    if (ids.empty()) throw InputError("text '" + text + "' has no tokens");
    return ids;
}

ClipBpeTokenizer::ClipBpeTokenizer(const std::filesystem::path& merges_file) {
    std::ifstream in(merges_file);
    if (!in) throw InputError("cannot open BPE merges file " + merges_file.string());
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    std::getline(in, line);  // version header
    constexpr std::size_t kMerges = 49152 - 256 - 2;
    while (merges.size() < kMerges && std::getline(in, line)) {
        const auto sp = line.find(' ');
        if (sp == std::string::npos) continue;
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    if (merges.empty()) throw InputError("BPE merges file " + merges_file.string() + " has no merges");

    byte_encoder_.resize(256);
    std::vector<std::string> vocab;
    for (const auto& [b, cp] : bytes_to_unicode()) {
        byte_encoder_[static_cast<std::size_t>(b)] = utf8(cp);
        vocab.push_back(utf8(cp));
    }
    const std::size_t base = vocab.size();
    for (std::size_t i = 0; i < base; ++i) vocab.push_back(vocab[i] + "</w>");
    for (const auto& m : merges) vocab.push_back(m.first + m.second);
    vocab.push_back("<|startoftext|>");
    vocab.push_back("<|endoftext|>");
    for (std::size_t i = 0; i < vocab.size(); ++i) encoder_.emplace(vocab[i], static_cast<int>(i));
    for (std::size_t i = 0; i < merges.size(); ++i) ranks_.emplace(merges[i], static_cast<int>(i));
    sot_ = encoder_.at("<|startoftext|>");
    eot_ = encoder_.at("<|endoftext|>");
}

std::vector<std::string> ClipBpeTokenizer::bpe(const std::string& token) const {
    std::vector<std::string> word = utf8_chars(token);
    if (word.empty()) return word;
    word.back() += "</w>";
    while (word.size() > 1) {
        int best = INT_MAX;
        std::size_t at = 0;
        for (std::size_t i = 0; i + 1 < word.size(); ++i) {
            auto it = ranks_.find({word[i], word[i + 1]});
            if (it != ranks_.end() && it->second < best) {
                best = it->second;
                at = i;
            }
        }
        if (best == INT_MAX) break;
        const std::string first = word[at], second = word[at + 1];
        std::vector<std::string> merged;
        for (std::size_t i = 0; i < word.size();) {
            if (i + 1 < word.size() && word[i] == first && word[i + 1] == second) {
                merged.push_back(first + second);
                i += 2;
            } else {
                merged.push_back(word[i++]);
            }
        }
        word = std::move(merged);
    }
    return word;
}

std::vector<int> ClipBpeTokenizer::encode(const std::string& text) const {
    static const std::regex pattern(R"('s|'t|'re|'ve|'m|'ll|'d|[a-z]+|[0-9]|[^\sa-z0-9]+)");
    const std::string cleaned = lower(text);
    std::vector<int> ids;
    for (auto it = std::sregex_iterator(cleaned.begin(), cleaned.end(), pattern); it != std::sregex_iterator(); ++it) {
        std::string mapped;
        for (unsigned char c : it->str()) mapped += byte_encoder_[c];
        for (const auto& piece : bpe(mapped)) {
            auto found = encoder_.find(piece);
            if (found == encoder_.end()) throw InputError("no BPE token for '" + piece + "' in '" + text + "'");
            ids.push_back(found->second);
        }
    }
    if (ids.empty()) throw InputError("text '" + text + "' has no tokens");
    return ids;
}

std::unique_ptr<Tokenizer> make_tokenizer(const TokenizerSpec& spec) {
    if (spec.kind == "word") {
        if (spec.path.empty()) return std::make_unique<WordTokenizer>(WordTokenizer::builtin());
        return std::make_unique<WordTokenizer>(WordTokenizer::from_file(spec.path));
    }
    if (spec.kind == "clip-bpe") {
        if (spec.path.empty()) throw ConfigMismatchError("clip-bpe tokenizer needs a merges file path");
        return std::make_unique<ClipBpeTokenizer>(spec.path);
    }
    throw ConfigMismatchError("unknown tokenizer kind '" + spec.kind + "'");
}

}  // namespace clamp
