#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "editlab/error.hpp"

namespace editlab {

// Closed bidirectional token <-> index map. Indices are dense from 0 in
// insertion order.
class Vocabulary {
  public:
    int add(const std::string& token);  // idempotent, returns the index
    int index(const std::string& token) const;
    bool contains(const std::string& token) const;
    const std::string& token(int index) const;
    int size() const { return static_cast<int>(tokens_.size()); }

    std::vector<int> encode(std::span<const std::string> tokens) const;
    std::vector<std::string> decode(std::span<const int> indices) const;
    std::string render(std::span<const int> indices) const;  // space-joined, for logs

    int newline() const { return newline_; }
    int end_fn() const { return end_fn_; }
    void set_newline(int ix) { newline_ = ix; }
    void set_end_fn(int ix) { end_fn_ = ix; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> by_token_;
    int newline_ = -1;
    int end_fn_ = -1;
};

}  // namespace editlab
