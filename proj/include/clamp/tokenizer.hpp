#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace clamp {

class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    /// Token ids of `text` without start/end markers. Throws InputError when
    /// some part of the text has no token.
    virtual std::vector<int> encode(const std::string& text) const = 0;
    virtual int sot() const = 0;
    virtual int eot() const = 0;
    virtual int vocab_size() const = 0;
};

/// Whitespace/punctuation word tokenizer over a fixed vocabulary. Ids are
/// assigned in vocabulary order; SOT and EOT follow the words.
class WordTokenizer : public Tokenizer {
public:
    explicit WordTokenizer(std::vector<std::string> words);
    /// Anatomy vocabulary covering the bundled schemas and common
    /// landmark names.
    static WordTokenizer builtin();
    /// One word per line.
    static WordTokenizer from_file(const std::filesystem::path& path);

    std::vector<int> encode(const std::string& text) const override;
    int sot() const override { return static_cast<int>(words_.size()); }
    int eot() const override { return static_cast<int>(words_.size()) + 1; }
    int vocab_size() const override { return static_cast<int>(words_.size()) + 2; }

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
};

/// Byte-level BPE tokenizer compatible with the released CLIP vocabulary
/// (bpe_simple_vocab_16e6.txt, uncompressed). Text is lower-cased and
/// split with an ASCII approximation of the CLIP pre-tokenizer pattern.
class ClipBpeTokenizer : public Tokenizer {
public:
    explicit ClipBpeTokenizer(const std::filesystem::path& merges_file);

    std::vector<int> encode(const std::string& text) const override;
    int sot() const override { return sot_; }
    int eot() const override { return eot_; }
    int vocab_size() const override { return static_cast<int>(encoder_.size()); }

private:
    std::vector<std::string> bpe(const std::string& token) const;

    std::map<std::string, int> encoder_;
    std::map<std::pair<std::string, std::string>, int> ranks_;
    std::vector<std::string> byte_encoder_;
    int sot_ = 0, eot_ = 0;
};

struct TokenizerSpec {
    std::string kind = "word";  // word | clip-bpe
    std::string path;           // vocabulary file; empty selects the builtin word list
};

std::unique_ptr<Tokenizer> make_tokenizer(const TokenizerSpec& spec);

}  // namespace clamp
