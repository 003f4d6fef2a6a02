#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <vector>

#include "flowkv/callgraph.hpp"
#include "flowkv/rng.hpp"
#include "flowkv/theory.hpp"
#include "test_util.hpp"

using namespace flowkv;
using test::chain_graph;
using test::enumerate_marginals;
using test::loop_graph;
using test::retry_graph;

TEST_CASE("two-agent chain builds with one edge") {
    CallGraph g = chain_graph();
    CHECK(g.num_agents() == 2);
    CHECK(g.edges().size() == 1);
    CHECK(g.end_symbol() == 2);
}

TEST_CASE("retry graph contains a cycle") {
    CallGraph g = retry_graph();
    // Tester -> Analyzer closes the loop
    CHECK(g.edges().count({3, 1}) == 1);
    CHECK(g.edges().count({1, 2}) == 1);
    CHECK_FALSE(g.is_deterministic());
}

TEST_CASE("non-stochastic kernel row is rejected") {
    CHECK_THROWS_AS(CallGraph({"A", "B"}, {{0, 1}},
                              {{{0}, {0.0, 0.9, 0.0}}, {{1}, {0.0, 0.0, 1.0}}}, {1.0, 0.0}, 64, 1),
                    ValidationError);
}

TEST_CASE("kernel mass on a missing edge is rejected") {
    CHECK_THROWS_AS(CallGraph({"A", "B"}, {},
                              {{{0}, {0.0, 1.0, 0.0}}, {{1}, {0.0, 0.0, 1.0}}}, {1.0, 0.0}, 64, 1),
                    ValidationError);
}

TEST_CASE("unreachable END is rejected") {
    // B loops on itself forever
    CHECK_THROWS_AS(CallGraph({"A", "B"}, {{0, 1}, {1, 1}},
                              {{{0}, {0.0, 1.0, 0.0}}, {{1}, {0.0, 1.0, 0.0}}}, {1.0, 0.0}, 64, 1),
                    ValidationError);
}

TEST_CASE("reachable state without a kernel row is rejected") {
    CHECK_THROWS_AS(
        CallGraph({"A", "B"}, {{0, 1}}, {{{0}, {0.0, 1.0, 0.0}}}, {1.0, 0.0}, 64, 1),
        ValidationError);
}

TEST_CASE("deterministic chain samples [A, B] for any seed") {
    CallGraph g = chain_graph();
    for (std::uint64_t seed : {1ULL, 7ULL, 12345ULL}) {
        WorkflowTrace t = g.sample_workflow(seed);
        CHECK(t.invocations == std::vector<AgentId>{0, 1});
        CHECK(t.terminated);
    }
}

TEST_CASE("same seed gives identical traces, and the tester always runs") {
    CallGraph g = retry_graph(0.5);
    WorkflowTrace a = g.sample_workflow(99, 42);
    WorkflowTrace b = g.sample_workflow(99, 42);
    CHECK(a.invocations == b.invocations);
    CHECK(a.terminated == b.terminated);
    CHECK(std::count(a.invocations.begin(), a.invocations.end(), 3) >= 1);
}

TEST_CASE("sampled transition frequencies converge to the kernel") {
    // P(B | A) = 0.3 in a graph where A can also go to C
    CallGraph g({"A", "B", "C"}, {{0, 1}, {0, 2}},
                {
                    {{0}, {0.0, 0.3, 0.7, 0.0}},
                    {{1}, {0.0, 0.0, 0.0, 1.0}},
                    {{2}, {0.0, 0.0, 0.0, 1.0}},
                },
                {1.0, 0.0, 0.0}, 64, 1);
    int b_count = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        WorkflowTrace t = g.sample_workflow(derive_seed(5, i));
        REQUIRE(t.invocations.size() == 2);
        if (t.invocations[1] == 1) ++b_count;
    }
    double freq = static_cast<double>(b_count) / n;
    CHECK(freq == Catch::Approx(0.3).margin(0.02));
}

TEST_CASE("empirical transitions match a multi-branch kernel") {
    CallGraph g = loop_graph();
    std::map<std::pair<AgentId, AgentId>, int> counts;
    std::map<AgentId, int> from_counts;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        WorkflowTrace t = g.sample_workflow(derive_seed(17, i));
        for (std::size_t j = 0; j + 1 < t.invocations.size(); ++j) {
            counts[{t.invocations[j], t.invocations[j + 1]}]++;
            from_counts[t.invocations[j]]++;
        }
    }
    auto observed = [&](AgentId a, AgentId b) {
        return static_cast<double>(counts[{a, b}]) / from_counts[a];
    };
    // chi-square-style tolerance: ~4 sigma on >= thousands of samples
    CHECK(observed(1, 0) == Catch::Approx(0.3 / 0.8).margin(0.03));
    CHECK(observed(1, 2) == Catch::Approx(0.5 / 0.8).margin(0.03));
    CHECK(observed(2, 1) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("deterministic chain marginals") {
    CallGraph g = chain_graph();
    std::vector<AgentId> prefix{0};
    Forecast f = g.true_kstep_marginals(prefix, 2);
    CHECK(f.at(0, 1) == Catch::Approx(1.0));    // step 1: B for sure
    CHECK(f.at(1, 2) == Catch::Approx(1.0));    // step 2: END for sure
    CHECK(f.survival(0) == Catch::Approx(1.0));
    CHECK(f.survival(1) == Catch::Approx(1.0));  // p_end at step 1 is zero
}

TEST_CASE("absorbed state degenerates to END") {
    CallGraph g = chain_graph();
    std::vector<AgentId> prefix{0, 1};  // at B: END with probability 1
    Forecast f = g.true_kstep_marginals(prefix, 3);
    for (int k = 0; k < 3; ++k) CHECK(f.at(k, 2) == Catch::Approx(1.0));
    CHECK(f.survival(1) == Catch::Approx(0.0));
    CHECK(f.survival(2) == Catch::Approx(0.0));
}

TEST_CASE("loop graph marginals equal brute-force enumeration") {
    CallGraph g = loop_graph();
    std::vector<AgentId> prefix{0};
    Forecast f = g.true_kstep_marginals(prefix, 3);
    auto oracle = enumerate_marginals(g, prefix, 3);
    for (int k = 0; k < 3; ++k)
        for (int a = 0; a < g.outcomes(); ++a)
            CHECK(f.at(k, a) == Catch::Approx(oracle[k][a]).margin(1e-9));
}

TEST_CASE("marginals match enumeration on random graphs") {
    Rng rng(2718);
    for (int trial = 0; trial < 30; ++trial) {
        CallGraph g = theory::random_graph(rng, 6);
        // random consistent prefix
        std::vector<AgentId> prefix;
        int hops = static_cast<int>(rng.uniform_int(4));
        for (int h = 0; h < hops; ++h) {
            const auto& row = g.row_for_prefix(prefix);
            auto next = static_cast<AgentId>(rng.pick_weighted(row));
            if (next == g.end_symbol()) break;
            prefix.push_back(next);
        }
        int K = 1 + static_cast<int>(rng.uniform_int(4));
        Forecast f = g.true_kstep_marginals(prefix, K);
        auto oracle = enumerate_marginals(g, prefix, K);
        for (int k = 0; k < K; ++k)
            for (int a = 0; a < g.outcomes(); ++a)
                REQUIRE(f.at(k, a) == Catch::Approx(oracle[k][a]).margin(1e-9));
    }
}

TEST_CASE("invalid prefix is rejected") {
    CallGraph g = chain_graph();
    std::vector<AgentId> bad{1, 0};  // B -> A is not an edge
    CHECK_THROWS_AS(g.true_kstep_marginals(bad, 2), ValidationError);
}

TEST_CASE("higher-order kernels reproduce position-dependent sequences") {
    // same agent, different successor depending on how it was reached
    CallGraph g({"A", "B", "C"}, {{0, 1}, {1, 2}, {2, 1}},
                {
                    {{0}, {0, 1, 0, 0}},
                    {{0, 1}, {0, 0, 1, 0}},
                    {{1, 2}, {0, 1, 0, 0}},
                    {{2, 1}, {0, 0, 0, 1}},
                },
                {1, 0, 0}, 64, 2);
    WorkflowTrace t = g.sample_workflow(1);
    CHECK(t.invocations == std::vector<AgentId>{0, 1, 2, 1});
    CHECK(g.is_deterministic());
    CHECK(g.deterministic_rollout({}) == std::vector<AgentId>{0, 1, 2, 1});
}

TEST_CASE("graph spec round trip through json") {
    nlohmann::json spec;
    spec["agents"] = {"Planner", "Worker"};
    spec["edges"] = nlohmann::json::array({nlohmann::json::array({"Planner", "Worker"})});
    spec["kernel"]["Planner"]["Worker"] = 1.0;
    spec["kernel"]["Worker"]["END"] = 1.0;
    spec["entry"]["Planner"] = 1.0;
    spec["max_steps"] = 16;
    CallGraph g = CallGraph::from_json(spec);
    CHECK(g.num_agents() == 2);
    CHECK(g.max_steps() == 16);
    CHECK(g.agent_by_name("Worker") == 1);
    CHECK_THROWS_AS(g.agent_by_name("nope"), UnknownNameError);
    WorkflowTrace t = g.sample_workflow(3, 7);
    CHECK(CallGraph::trace_to_csv(t) == "7,0,0\n7,1,1\n");
}

TEST_CASE("max_steps caps divergent walks") {
    // A always returns to A with high probability; END reachable but rare
    CallGraph g({"A"}, {{0, 0}}, {{{0}, {0.999999, 0.000001}}}, {1.0}, 8, 1);
    WorkflowTrace t = g.sample_workflow(4);
    CHECK(t.invocations.size() <= 8);
    if (t.invocations.size() == 8) CHECK_FALSE(t.terminated);
}
