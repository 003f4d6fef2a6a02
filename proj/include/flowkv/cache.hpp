#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "flowkv/csv.hpp"
#include "flowkv/errors.hpp"
#include "flowkv/score_heap.hpp"
#include "flowkv/types.hpp"

namespace flowkv {

enum class Tier { Device, Host, Absent };

inline const char* tier_name(Tier t) {
    switch (t) {
        case Tier::Device: return "device";
        case Tier::Host: return "host";
        default: return "absent";
    }
}

struct MatchResult {
    std::int64_t device_hit = 0;
    std::int64_t host_hit = 0;
    std::int64_t miss = 0;
    std::vector<int> path;       // matched nodes, root-side first
    std::vector<int> host_path;  // HOST subset of path, root-side first
};

struct InsertReport {
    std::int64_t cached = 0;     // tokens newly placed on device (revived + appended)
    std::vector<int> host_path;  // HOST nodes on the path, root-side first
    int leaf = -1;               // deepest path node after the insert
};

/// Radix-tree prefix cache over a device tier and a host tier.
///
/// Nodes hold contiguous token segments. Device residency is prefix-closed:
/// a DEVICE node never sits below a HOST or ABSENT node. Each node carries
/// per-workflow access indicators; a node whose tagged workflows have all
/// terminated is retired. Evictable candidates (device leaves) are kept in
/// three orderings: plain LRU, retired-by-popularity, and a score heap.
///
/// Single-writer: owned by one simulation loop, no internal synchronization.
class CacheTree {
public:
    struct Node {
        int id = 0;
        int parent = -1;
        std::vector<TokenId> tokens;
        Tier tier = Tier::Device;
        bool retired = false;
        std::uint64_t last_access = 0;
        double score = 0.0;
        std::map<TokenId, int> children;
        int device_children = 0;
        std::map<WorkflowId, std::uint64_t> access;  // active workflow -> agent bits
        int ever_tagged = 0;
        bool indexed = false;

        std::int64_t len() const { return static_cast<std::int64_t>(tokens.size()); }
    };

    CacheTree(std::int64_t device_capacity, std::int64_t host_capacity)
        : device_capacity_(device_capacity), host_capacity_(host_capacity) {
        if (device_capacity_ <= 0 || host_capacity_ < 0)
            throw ValidationError("cache capacities must be positive");
        Node root;
        root.id = 0;
        root.tier = Tier::Device;
        nodes_.push_back(std::move(root));
    }

    std::int64_t device_capacity() const { return device_capacity_; }
    std::int64_t host_capacity() const { return host_capacity_; }
    std::int64_t device_used() const { return device_used_; }
    std::int64_t host_used() const { return host_used_; }
    std::int64_t device_free() const { return device_capacity_ - device_used_; }
    std::int64_t host_free() const { return host_capacity_ - host_used_; }
    std::int64_t retired_device_tokens() const { return retired_device_tokens_; }
    std::int64_t unknown_workflow_warnings() const { return unknown_workflow_warnings_; }

    const Node& node(int id) const { return nodes_[id]; }
    std::size_t node_count() const { return nodes_.size(); }

    const std::set<std::pair<std::uint64_t, int>>& lru_leaves() const { return lru_leaves_; }
    const std::set<std::tuple<int, std::uint64_t, int>>& retired_leaves() const {
        return retired_leaves_;
    }
    const std::set<std::pair<std::uint64_t, int>>& host_nodes() const { return host_index_; }
    ScoreHeap& heap() { return heap_; }
    const ScoreHeap& heap() const { return heap_; }

    const std::vector<int>* touched_nodes(WorkflowId w) const {
        auto it = workflows_.find(w);
        return it == workflows_.end() ? nullptr : &it->second.touched;
    }
    bool workflow_known(WorkflowId w) const { return workflows_.count(w) != 0; }
    bool workflow_terminated(WorkflowId w) const {
        auto it = workflows_.find(w);
        return it != workflows_.end() && it->second.terminated;
    }

    std::vector<int> ancestors_of(int id) const {
        std::vector<int> out;
        for (int p = nodes_[id].parent; p > 0; p = nodes_[p].parent) out.push_back(p);
        return out;
    }

    /// Longest-prefix walk. Tags every matched node with (workflow, agent),
    /// bumps its timestamp, and reports the device/host/miss token split.
    /// A divergence inside a node splits it so the matched part becomes its
    /// own node; token counts are unaffected by splits.
    MatchResult match_prefix(std::span<const TokenId> tokens, WorkflowId w, int agent) {
        if (tokens.empty()) throw ValidationError("match_prefix needs a non-empty token sequence");
        register_workflow(w);
        MatchResult r;
        int cur = 0;
        std::size_t i = 0;
        bool seen_host = false;
        while (i < tokens.size()) {
            auto it = nodes_[cur].children.find(tokens[i]);
            if (it == nodes_[cur].children.end()) break;
            int cid = it->second;
            if (nodes_[cid].tier == Tier::Absent) break;
            std::size_t m = common_prefix(nodes_[cid].tokens, tokens.subspan(i));
            if (m < nodes_[cid].tokens.size()) {
                split(cid, m);  // matched part becomes node `cid`
            }
            Node& ch = nodes_[cid];
            if (ch.tier == Tier::Device) {
                if (seen_host) throw ValidationError("device node below host node");
                r.device_hit += ch.len();
            } else {
                seen_host = true;
                r.host_hit += ch.len();
                r.host_path.push_back(cid);
            }
            touch(cid, w, agent);
            r.path.push_back(cid);
            i += m;
            cur = cid;
        }
        r.miss = static_cast<std::int64_t>(tokens.size() - i);
        return r;
    }

    /// Inserts the missing suffix of `tokens` onto the device tier, reviving
    /// ABSENT stretches of the path and appending a fresh tail node. With the
    /// default budget the caller must have freed enough device space first;
    /// an explicit budget caps how many tokens are cached instead.
    InsertReport insert_suffix(std::span<const TokenId> tokens, WorkflowId w, int agent,
                               std::int64_t budget = -1) {
        if (tokens.empty()) throw ValidationError("insert_suffix needs a non-empty token sequence");
        register_workflow(w);
        if (budget < 0) {
            std::int64_t needed = probe_missing(tokens);
            if (needed > device_free())
                throw ValidationError("insert_suffix without room: caller must evict first");
            budget = needed;
        } else {
            budget = std::min(budget, device_free());
        }

        InsertReport rep;
        int cur = 0;
        std::size_t i = 0;
        bool on_device_path = true;  // new segments may only attach below device nodes
        while (i < tokens.size()) {
            auto it = nodes_[cur].children.find(tokens[i]);
            if (it == nodes_[cur].children.end()) break;
            int cid = it->second;
            std::size_t m = common_prefix(nodes_[cid].tokens, tokens.subspan(i));
            if (m < nodes_[cid].tokens.size()) split(cid, m);
            if (nodes_[cid].tier == Tier::Absent) {
                if (!on_device_path) break;  // cannot revive below a host node
                if (budget < nodes_[cid].len()) {
                    if (budget > 0) {
                        split(cid, static_cast<std::size_t>(budget));
                        revive(cid, w, agent);
                        rep.cached += budget;
                        budget = 0;
                        cur = cid;
                    }
                    rep.leaf = cur;
                    return rep;
                }
                budget -= nodes_[cid].len();
                rep.cached += nodes_[cid].len();
                revive(cid, w, agent);
            } else {
                if (nodes_[cid].tier == Tier::Host) {
                    rep.host_path.push_back(cid);
                    on_device_path = false;
                }
                touch(cid, w, agent);
            }
            i += m;
            cur = cid;
        }
        if (i < tokens.size() && budget > 0 && on_device_path) {
            std::size_t take = std::min<std::size_t>(tokens.size() - i, static_cast<std::size_t>(budget));
            int nid = make_node(cur, std::vector<TokenId>(tokens.begin() + i, tokens.begin() + i + take),
                                Tier::Device);
            device_used_ += nodes_[nid].len();
            touch(nid, w, agent);
            rep.cached += nodes_[nid].len();
            cur = nid;
        }
        rep.leaf = cur;
        return rep;
    }

    /// Marks every node whose tagged workflows have all terminated. Returns
    /// the ids of nodes the workflow was tagged on (retired or not), so the
    /// caller can refresh their scores.
    std::vector<int> on_workflow_terminated(WorkflowId w, int* newly_retired = nullptr) {
        auto it = workflows_.find(w);
        if (newly_retired) *newly_retired = 0;
        if (it == workflows_.end() || it->second.terminated) {
            ++unknown_workflow_warnings_;
            return {};
        }
        it->second.terminated = true;
        std::vector<int> affected = std::move(it->second.touched);
        it->second.touched.clear();
        int count = 0;
        for (int id : affected) {
            Node& n = nodes_[id];
            auto a = n.access.find(w);
            if (a == n.access.end()) continue;
            deindex(id);
            n.access.erase(a);
            if (n.access.empty() && !n.retired) {
                n.retired = true;
                if (n.tier == Tier::Device) retired_device_tokens_ += n.len();
                ++count;
            }
            reindex(id);
        }
        if (newly_retired) *newly_retired = count;
        return affected;
    }

    /// Moves a device leaf to the host tier, or drops it to ABSENT when the
    /// host tier has no room (host accounting unchanged in that case).
    Tier demote_to_host(int id) {
        Node& n = nodes_[id];
        if (id == 0 || n.tier != Tier::Device) throw ValidationError("demote needs a device node");
        if (n.device_children > 0)
            throw ValidationError("demote of an interior node with device descendants");
        deindex(id);
        device_used_ -= n.len();
        if (n.retired) retired_device_tokens_ -= n.len();
        Tier target;
        if (host_free() >= n.len()) {
            n.tier = Tier::Host;
            host_used_ += n.len();
            host_index_.insert({n.last_access, id});
            target = Tier::Host;
        } else {
            n.tier = Tier::Absent;
            drop_host_subtree(id);
            target = Tier::Absent;
        }
        adjust_parent_device_children(id, -1);
        return target;
    }

    /// Moves a host node whose parent is device-resident back to the device.
    void promote_to_device(int id) {
        Node& n = nodes_[id];
        if (n.tier != Tier::Host) throw ValidationError("promote needs a host node");
        if (nodes_[n.parent].tier != Tier::Device)
            throw ValidationError("promote needs a device-resident parent");
        if (device_free() < n.len()) throw ValidationError("promote without device room");
        host_index_.erase({n.last_access, id});
        host_used_ -= n.len();
        n.tier = Tier::Device;
        device_used_ += n.len();
        if (n.retired) retired_device_tokens_ += n.len();
        adjust_parent_device_children(id, +1);
        reindex(id);
    }

    /// Drops a host node (and any host descendants) to ABSENT.
    void drop_host_node(int id) {
        Node& n = nodes_[id];
        if (n.tier != Tier::Host) throw ValidationError("drop needs a host node");
        host_index_.erase({n.last_access, id});
        host_used_ -= n.len();
        n.tier = Tier::Absent;
        drop_host_subtree(id);
    }

    /// Drops least-recently-accessed host nodes until `need` tokens fit,
    /// skipping `keep`. Returns the ids dropped, oldest first.
    std::vector<int> make_room_on_host(std::int64_t need, const std::set<int>& keep = {}) {
        std::vector<int> dropped;
        auto it = host_index_.begin();
        while (host_free() < need && it != host_index_.end()) {
            int id = it->second;
            ++it;
            if (keep.count(id)) continue;
            if (nodes_[id].tier != Tier::Host) continue;  // dropped via an ancestor cascade
            drop_host_node(id);
            dropped.push_back(id);
            it = host_index_.begin();  // cascade may invalidate; restart scan
        }
        return dropped;
    }

    void set_score(int id, double score) {
        Node& n = nodes_[id];
        if (n.score == score) return;  // no-op refresh keeps the heap layout
        n.score = score;
        if (n.indexed && !n.retired) heap_.update(id, score, n.last_access);
    }

    std::uint64_t clock() const { return clock_; }

    /// One record per node: node_id,parent_id,token_len,tier,retired,workflows
    std::string dump() const {
        std::string out = "node_id,parent_id,token_len,tier,retired,workflows\n";
        for (const Node& n : nodes_) {
            if (n.id == 0) continue;
            CsvRow row;
            row.add(n.id).add(n.parent).add(n.len()).add(tier_name(n.tier));
            row.add(n.retired ? "1" : "0");
            std::string ws;
            for (const auto& [w, bits] : n.access) {
                (void)bits;
                if (!ws.empty()) ws += ' ';
                ws += std::to_string(w);
            }
            out += row.str() + "," + ws + "\n";
        }
        return out;
    }

    /// Recomputes every derived quantity from scratch and checks it against
    /// the tracked state. Throws on the first inconsistency.
    void audit() const {
        std::int64_t dev = 0, host = 0, retired_dev = 0;
        for (const Node& n : nodes_) {
            if (n.id == 0) {
                if (n.tier != Tier::Device) throw ValidationError("audit: root must be device");
                continue;
            }
            if (n.tokens.empty()) throw ValidationError("audit: empty node segment");
            const Node& p = nodes_[n.parent];
            if (n.tier == Tier::Device) {
                dev += n.len();
                if (n.retired) retired_dev += n.len();
                if (p.tier != Tier::Device) throw ValidationError("audit: device below non-device");
            } else if (n.tier == Tier::Host) {
                host += n.len();
                if (p.tier == Tier::Absent) throw ValidationError("audit: host below absent");
            }
            auto pc = p.children.find(n.tokens[0]);
            if (pc == p.children.end() || pc->second != n.id)
                throw ValidationError("audit: child link broken");
            int dc = 0;
            for (auto [tok, cid] : n.children) {
                if (nodes_[cid].parent != n.id || nodes_[cid].tokens.empty() ||
                    nodes_[cid].tokens[0] != tok)
                    throw ValidationError("audit: radix keying broken");
                if (nodes_[cid].tier == Tier::Device) ++dc;
            }
            if (dc != n.device_children) throw ValidationError("audit: device child count stale");
            bool should_retire = n.access.empty() && n.ever_tagged > 0;
            if (n.retired != should_retire) throw ValidationError("audit: retired flag stale");
            for (const auto& [w, bits] : n.access) {
                (void)bits;
                auto wit = workflows_.find(w);
                if (wit == workflows_.end() || wit->second.terminated)
                    throw ValidationError("audit: access map holds a terminated workflow");
            }
            bool leaf = n.tier == Tier::Device && n.device_children == 0;
            if (leaf != n.indexed) throw ValidationError("audit: leaf index membership stale");
            if (leaf) {
                if (!lru_leaves_.count({n.last_access, n.id}))
                    throw ValidationError("audit: lru index missing a leaf");
                if (n.retired != (retired_leaves_.count({n.ever_tagged, n.last_access, n.id}) > 0))
                    throw ValidationError("audit: retired index stale");
                if (n.retired == heap_.contains(n.id))
                    throw ValidationError("audit: heap membership stale");
            } else {
                if (heap_.contains(n.id)) throw ValidationError("audit: non-leaf in heap");
            }
            if ((n.tier == Tier::Host) != (host_index_.count({n.last_access, n.id}) > 0))
                throw ValidationError("audit: host index stale");
        }
        int dc0 = 0;
        for (auto [tok, cid] : nodes_[0].children) {
            (void)tok;
            if (nodes_[cid].tier == Tier::Device) ++dc0;
        }
        if (dc0 != nodes_[0].device_children) throw ValidationError("audit: root child count stale");
        if (dev != device_used_ || host != host_used_ || retired_dev != retired_device_tokens_)
            throw ValidationError("audit: tier accounting drifted");
        if (device_used_ > device_capacity_ || host_used_ > host_capacity_)
            throw ValidationError("audit: capacity exceeded");
        std::size_t leaves = 0;
        for (const Node& n : nodes_)
            if (n.id != 0 && n.tier == Tier::Device && n.device_children == 0) ++leaves;
        if (leaves != lru_leaves_.size()) throw ValidationError("audit: lru index size off");
        heap_.audit();
    }

private:
    std::vector<Node> nodes_;
    std::int64_t device_capacity_, host_capacity_;
    std::int64_t device_used_ = 0, host_used_ = 0;
    std::int64_t retired_device_tokens_ = 0;
    std::int64_t unknown_workflow_warnings_ = 0;
    std::uint64_t clock_ = 0;

    struct WorkflowEntry {
        bool terminated = false;
        std::vector<int> touched;
    };
    std::map<WorkflowId, WorkflowEntry> workflows_;

    std::set<std::pair<std::uint64_t, int>> lru_leaves_;                 // (last_access, id)
    std::set<std::tuple<int, std::uint64_t, int>> retired_leaves_;       // (ever, last, id)
    std::set<std::pair<std::uint64_t, int>> host_index_;                 // (last_access, id)
    ScoreHeap heap_;                                                     // active device leaves

    static std::size_t common_prefix(const std::vector<TokenId>& seg,
                                     std::span<const TokenId> q) {
        std::size_t n = std::min(seg.size(), q.size());
        std::size_t i = 0;
        while (i < n && seg[i] == q[i]) ++i;
        return i;
    }

    void register_workflow(WorkflowId w) {
        auto [it, added] = workflows_.try_emplace(w);
        (void)added;
        if (it->second.terminated)
            throw ValidationError("terminated workflow touched the cache again");
    }

    bool is_device_leaf(const Node& n) const {
        return n.id != 0 && n.tier == Tier::Device && n.device_children == 0;
    }

    void deindex(int id) {
        Node& n = nodes_[id];
        if (!n.indexed) return;
        lru_leaves_.erase({n.last_access, n.id});
        if (n.retired)
            retired_leaves_.erase({n.ever_tagged, n.last_access, n.id});
        else
            heap_.erase(n.id);
        n.indexed = false;
    }

    void reindex(int id) {
        Node& n = nodes_[id];
        if (n.indexed || !is_device_leaf(n)) return;
        lru_leaves_.insert({n.last_access, n.id});
        if (n.retired)
            retired_leaves_.insert({n.ever_tagged, n.last_access, n.id});
        else
            heap_.push(n.id, n.score, n.last_access);
        n.indexed = true;
    }

    /// Tag + timestamp bump, with index and retired-state maintenance.
    void touch(int id, WorkflowId w, int agent) {
        Node& n = nodes_[id];
        bool was_host = n.tier == Tier::Host;
        deindex(id);
        if (was_host) host_index_.erase({n.last_access, n.id});
        auto [it, fresh] = n.access.try_emplace(w, 0);
        if (fresh) {
            ++n.ever_tagged;
            workflows_.at(w).touched.push_back(id);
        }
        it->second |= 1ULL << agent;
        if (n.retired) {
            n.retired = false;
            if (n.tier == Tier::Device) retired_device_tokens_ -= n.len();
        }
        n.last_access = ++clock_;
        if (was_host) host_index_.insert({n.last_access, n.id});
        reindex(id);
    }

    void revive(int id, WorkflowId w, int agent) {
        Node& n = nodes_[id];
        n.tier = Tier::Device;
        device_used_ += n.len();
        if (n.retired) retired_device_tokens_ += n.len();
        adjust_parent_device_children(id, +1);
        touch(id, w, agent);
    }

    int make_node(int parent, std::vector<TokenId> tokens, Tier tier) {
        int id = static_cast<int>(nodes_.size());
        Node n;
        n.id = id;
        n.parent = parent;
        n.tokens = std::move(tokens);
        n.tier = tier;
        nodes_.push_back(std::move(n));
        nodes_[parent].children[nodes_[id].tokens[0]] = id;
        if (tier == Tier::Device) adjust_parent_device_children(id, +1);
        return id;
    }

    void adjust_parent_device_children(int id, int delta) {
        int pid = nodes_[id].parent;
        deindex(pid);
        nodes_[pid].device_children += delta;
        reindex(pid);
    }

    /// Splits node `id` at `offset`: the node keeps the first `offset`
    /// tokens, a new child takes the remainder plus the old children and
    /// all bookkeeping (tier, tags, timestamps) is shared by both halves.
    void split(int id, std::size_t offset) {
        Node& up = nodes_[id];
        if (offset == 0 || offset >= up.tokens.size())
            throw ValidationError("split offset out of range");
        deindex(id);
        bool was_host = up.tier == Tier::Host;
        int low_id = static_cast<int>(nodes_.size());
        Node low;
        low.id = low_id;
        low.parent = id;
        low.tokens.assign(up.tokens.begin() + offset, up.tokens.end());
        low.tier = up.tier;
        low.retired = up.retired;
        low.last_access = up.last_access;
        low.score = up.score;
        low.children = std::move(up.children);
        low.device_children = up.device_children;
        low.access = up.access;
        low.ever_tagged = up.ever_tagged;
        nodes_.push_back(std::move(low));

        Node& u = nodes_[id];
        Node& l = nodes_[low_id];
        for (auto [tok, cid] : l.children) {
            (void)tok;
            nodes_[cid].parent = low_id;
        }
        u.tokens.resize(offset);
        u.children.clear();
        u.children[l.tokens[0]] = low_id;
        u.device_children = l.tier == Tier::Device ? 1 : 0;
        if (was_host) host_index_.insert({l.last_access, low_id});
        for (const auto& [w, bits] : l.access) {
            (void)bits;
            workflows_.at(w).touched.push_back(low_id);
        }
        reindex(id);
        reindex(low_id);
    }

    void drop_host_subtree(int id) {
        for (auto [tok, cid] : nodes_[id].children) {
            (void)tok;
            Node& c = nodes_[cid];
            if (c.tier == Tier::Device)
                throw ValidationError("device node stranded below a dropped node");
            if (c.tier == Tier::Host) {
                host_index_.erase({c.last_access, cid});
                host_used_ -= c.len();
                c.tier = Tier::Absent;
                drop_host_subtree(cid);
            }
        }
    }

    /// Tokens insert_suffix would place on the device for this sequence:
    /// absent revivals and the fresh tail, as long as the path stays
    /// device-resident.
    std::int64_t probe_missing(std::span<const TokenId> tokens) const {
        int cur = 0;
        std::size_t i = 0;
        std::int64_t missing = 0;
        bool on_device_path = true;
        while (i < tokens.size()) {
            auto it = nodes_[cur].children.find(tokens[i]);
            if (it == nodes_[cur].children.end()) break;
            const Node& ch = nodes_[it->second];
            std::size_t m = common_prefix(ch.tokens, tokens.subspan(i));
            if (ch.tier == Tier::Absent) {
                if (!on_device_path) return missing;
                missing += static_cast<std::int64_t>(m);
            } else if (ch.tier == Tier::Host) {
                on_device_path = false;
            }
            i += m;
            if (m < ch.tokens.size()) break;
            cur = it->second;
        }
        if (on_device_path) missing += static_cast<std::int64_t>(tokens.size() - i);
        return missing;
    }
};

}  // namespace flowkv
