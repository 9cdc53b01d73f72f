#include "editlab/vocab.hpp"

namespace editlab {

int Vocabulary::add(const std::string& token) {
    auto it = by_token_.find(token);
    if (it != by_token_.end()) return it->second;
    const int ix = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    by_token_.emplace(token, ix);
    return ix;
}

int Vocabulary::index(const std::string& token) const {
    auto it = by_token_.find(token);
    if (it == by_token_.end()) throw ContractError("vocabulary: unknown token '" + token + "'");
    return it->second;
}

bool Vocabulary::contains(const std::string& token) const { return by_token_.count(token) > 0; }

const std::string& Vocabulary::token(int index) const {
    if (index < 0 || index >= size()) throw ContractError("vocabulary: index out of range");
    return tokens_[static_cast<std::size_t>(index)];
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const std::string& t : tokens) out.push_back(index(t));
    return out;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> indices) const {
    std::vector<std::string> out;
    out.reserve(indices.size());
    for (int ix : indices) out.push_back(token(ix));
    return out;
}

std::string Vocabulary::render(std::span<const int> indices) const {
    std::string out;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (i) out += ' ';
        out += token(indices[i]);
    }
    return out;
}

}  // namespace editlab
