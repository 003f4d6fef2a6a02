#pragma once

#include <cstdint>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "flowkv/errors.hpp"

namespace flowkv {

/// Min-heap keyed by (score, last_access, id) with a position index so
/// score changes reposition a node in O(log n). Pop order is a strict
/// total order, which keeps eviction deterministic under score ties.
class ScoreHeap {
public:
    struct Entry {
        double score;
        std::uint64_t last_access;
        int id;
    };

    bool contains(int id) const { return pos_.count(id) != 0; }
    std::size_t size() const { return heap_.size(); }
    bool empty() const { return heap_.empty(); }

    void push(int id, double score, std::uint64_t last_access) {
        if (contains(id)) throw ValidationError("heap push of an existing id");
        heap_.push_back({score, last_access, id});
        pos_[id] = heap_.size() - 1;
        sift_up(heap_.size() - 1);
    }

    void update(int id, double score, std::uint64_t last_access) {
        auto it = pos_.find(id);
        if (it == pos_.end()) throw ValidationError("heap update of a missing id");
        std::size_t i = it->second;
        Entry old = heap_[i];
        heap_[i] = {score, last_access, id};
        if (less(heap_[i], old))
            sift_up(i);
        else
            sift_down(i);
    }

    void erase(int id) {
        auto it = pos_.find(id);
        if (it == pos_.end()) throw ValidationError("heap erase of a missing id");
        std::size_t i = it->second;
        pos_.erase(it);
        if (i + 1 != heap_.size()) {
            Entry moved = heap_.back();
            heap_[i] = moved;
            heap_.pop_back();
            pos_[moved.id] = i;
            sift_up(i);
            sift_down(pos_[moved.id]);
        } else {
            heap_.pop_back();
        }
    }

    const Entry& top() const {
        if (heap_.empty()) throw ValidationError("top of empty heap");
        return heap_[0];
    }

    Entry pop() {
        Entry e = top();
        erase(e.id);
        return e;
    }

    /// Depth of the longest single sift performed so far; unit tests bound
    /// this by ceil(log2 n) + 1.
    std::size_t max_sift_depth() const { return max_sift_depth_; }
    void reset_sift_stats() { max_sift_depth_ = 0; }

    const std::vector<Entry>& raw() const { return heap_; }

    void audit() const {
        if (pos_.size() != heap_.size()) throw ValidationError("heap index size mismatch");
        for (std::size_t i = 0; i < heap_.size(); ++i) {
            auto it = pos_.find(heap_[i].id);
            if (it == pos_.end() || it->second != i)
                throw ValidationError("heap position index inconsistent");
            if (i > 0 && less(heap_[i], heap_[(i - 1) / 2]))
                throw ValidationError("heap order violated");
        }
    }

private:
    std::vector<Entry> heap_;
    std::unordered_map<int, std::size_t> pos_;
    std::size_t max_sift_depth_ = 0;

    static bool less(const Entry& a, const Entry& b) {
        return std::tie(a.score, a.last_access, a.id) < std::tie(b.score, b.last_access, b.id);
    }

    void sift_up(std::size_t i) {
        std::size_t depth = 0;
        while (i > 0) {
            std::size_t parent = (i - 1) / 2;
            if (!less(heap_[i], heap_[parent])) break;
            swap_at(i, parent);
            i = parent;
            ++depth;
        }
        max_sift_depth_ = std::max(max_sift_depth_, depth);
    }

    void sift_down(std::size_t i) {
        std::size_t depth = 0;
        for (;;) {
            std::size_t l = 2 * i + 1, r = 2 * i + 2, best = i;
            if (l < heap_.size() && less(heap_[l], heap_[best])) best = l;
            if (r < heap_.size() && less(heap_[r], heap_[best])) best = r;
            if (best == i) break;
            swap_at(i, best);
            i = best;
            ++depth;
        }
        max_sift_depth_ = std::max(max_sift_depth_, depth);
    }

    void swap_at(std::size_t a, std::size_t b) {
        std::swap(heap_[a], heap_[b]);
        pos_[heap_[a].id] = a;
        pos_[heap_[b].id] = b;
    }
};

}  // namespace flowkv
