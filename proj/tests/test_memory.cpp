#include "hiermem/memory.hpp"

#include "fixtures.hpp"

#include <doctest.h>

#include <numbers>
#include <set>

using namespace hiermem;

namespace {

Vec v2(double a, double b) { return (Vec(2) << a, b).finished(); }

MemoryBlock block(int id, Vec c, std::vector<int> members, long last_used) {
    MemoryBlock b;
    b.block_id = id;
    b.centroid = std::move(c);
    b.member_tokens = std::move(members);
    b.last_used_step = last_used;
    return b;
}

}  // namespace

TEST_SUITE("memory") {

TEST_CASE("cosine_distance") {
    CHECK(*cosine_distance(v2(1, 0), v2(2, 0)) == 0.0);
    CHECK(*cosine_distance(v2(1, 0), v2(0, 3)) == doctest::Approx(1.0));
    CHECK(*cosine_distance(v2(1, 0), v2(-1, 0)) == 2.0);
    CHECK_FALSE(cosine_distance(v2(0, 0), v2(1, 0)).has_value());
}

TEST_CASE("cluster_tokens examples") {
    const std::vector<Vec> one{v2(0.2, 0.9)};
    const auto s1 = cluster_tokens(one, 0.5);
    REQUIRE(s1.blocks.size() == 1);
    CHECK(s1.blocks[0].member_tokens == std::vector<int>{0});

    const std::vector<Vec> same(6, v2(-1, 2));
    CHECK(cluster_tokens(same, 0.1).blocks.size() == 1);

    const std::vector<Vec> groups{v2(1, 0.05), v2(0.02, 1), v2(1, -0.04), v2(-0.03, 1), v2(1, 0.01)};
    const auto s2 = cluster_tokens(groups, 0.5);
    CHECK(s2.blocks.size() == 2);
    CHECK(fixtures::partition_of(s2) == oracle::average_linkage(groups, 0.5));
    CHECK(fixtures::partition_of(s2) == std::vector<std::vector<int>>{{0, 2, 4}, {1, 3}});

    CHECK_THROWS_AS(cluster_tokens(std::vector<Vec>{}, 0.5), InputError);
    CHECK_THROWS_AS(cluster_tokens(one, -0.1), InputError);
    CHECK_THROWS_AS(cluster_tokens(one, 2.5), InputError);
}

TEST_CASE("cluster_tokens agrees with the brute-force oracle") {
    std::mt19937_64 rng(1234);
    std::uniform_real_distribution<double> th(0.0, 2.0);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 1 + trial % 8;
        const auto xs = fixtures::clustering_instance(rng, n, 1 + trial % 4);
        const double theta = th(rng);
        const auto s = cluster_tokens(xs, theta);
        CHECK(fixtures::partition_of(s) == oracle::average_linkage(xs, theta));
    }
}

TEST_CASE("cluster_tokens partitions its input and builds mean centroids") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 1 + trial % 20;
        const auto xs = fixtures::clustering_instance(rng, n, 3);
        std::vector<int> ids(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = 100 + 3 * i;
        const auto s = cluster_tokens(xs, 0.4, ids);
        CHECK_NOTHROW(s.validate());
        CHECK(s.total_members() == n);
        std::set<int> seen;
        for (const auto& b : s.blocks) {
            Vec mean = Vec::Zero(3);
            for (int m : b.member_tokens) {
                seen.insert(m);
                mean += xs[static_cast<std::size_t>((m - 100) / 3)];
            }
            CHECK((b.centroid - mean / b.member_count()).norm() < 1e-12);
        }
        CHECK(seen == std::set<int>(ids.begin(), ids.end()));
    }
}

TEST_CASE("cluster_tokens threshold extremes") {
    std::vector<Vec> xs{v2(1, 0), v2(3, 0), v2(0, 1), v2(0, 0.5), v2(-1, 1), v2(1, 1), v2(2, 2)};
    // theta 0: one block per distinct direction
    CHECK(cluster_tokens(xs, 0.0).blocks.size() == 4);
    CHECK(cluster_tokens(xs, 2.0).blocks.size() == 1);
    xs.push_back(v2(0, 0));
    const auto s = cluster_tokens(xs, 2.0);
    CHECK(s.blocks.size() == 2);  // the zero vector stays alone
    CHECK(s.blocks[static_cast<std::size_t>(s.find_block(7))].member_count() == 1);
}

TEST_CASE("cluster_tokens honours min_blocks") {
    std::mt19937_64 rng(9);
    std::vector<Vec> xs;
    for (int i = 0; i < 30; ++i) xs.push_back(oracle::random_vec(rng, 4));
    for (std::size_t k : {1u, 5u, 17u, 30u}) CHECK(cluster_tokens(xs, 2.0, {}, k).blocks.size() == k);
}

TEST_CASE("enforce_capacity and touch") {
    std::mt19937_64 rng(10);
    std::vector<Vec> xs;
    for (int i = 0; i < 12; ++i) xs.push_back(oracle::random_vec(rng, 3));
    auto s = cluster_tokens(xs, 0.0);
    REQUIRE(s.blocks.size() == 12);
    enforce_capacity(s, 5);
    CHECK(s.blocks.size() == 5);
    CHECK(s.capacity == 5);
    CHECK(s.total_members() == 12);
    CHECK_NOTHROW(s.validate());

    s.step = 42;
    const std::vector<int> used{3};
    touch(s, used);
    const auto& b = s.blocks[static_cast<std::size_t>(s.find_block(3))];
    CHECK(b.last_used_step == 42);
    CHECK(b.usage_count == 1);
}

TEST_CASE("MemoryState validation") {
    MemoryState s;
    s.capacity = 2;
    s.blocks = {block(0, v2(1, 0), {1, 2}, 0), block(1, v2(0, 1), {3}, 0)};
    CHECK_NOTHROW(s.validate());
    s.blocks[1].member_tokens = {2};
    CHECK_THROWS_AS(s.validate(), InputError);
    s.blocks[1].member_tokens = {3};
    s.blocks[1].block_id = 0;
    CHECK_THROWS_AS(s.validate(), InputError);
    s.blocks[1].block_id = 1;
    s.capacity = 1;
    CHECK_THROWS_AS(s.validate(), InputError);
}

TEST_CASE("block_summary") {
    const std::vector<Vec> one{v2(4, -2)};
    CHECK(block_summary(one) == v2(4, -2));
    const std::vector<Vec> two{v2(1, 0), v2(0, 1)};
    CHECK(block_summary(two) == v2(0.5, 0.5));
    CHECK_THROWS_AS(block_summary(std::vector<Vec>{}), InputError);
    std::mt19937_64 rng(5);
    std::vector<Vec> xs;
    for (int i = 0; i < 9; ++i) xs.push_back(oracle::random_vec(rng, 3));
    Vec ref = Vec::Zero(3);
    for (const auto& x : xs)
        for (int i = 0; i < 3; ++i) ref[i] += x[i] / 9.0;
    CHECK((block_summary(xs) - ref).norm() < 1e-14);
}

TEST_CASE("js_divergence") {
    CHECK(js_divergence(v2(0.3, 0.7), v2(0.3, 0.7)) == 0.0);
    CHECK(js_divergence(v2(1, 0), v2(0, 1)) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
    CHECK(js_divergence(v2(0.5, 0.5), v2(0.9, 0.1)) == doctest::Approx(0.10174922507919676).epsilon(1e-13));
    CHECK_THROWS_AS(js_divergence(v2(0.5, 0.6), v2(0.5, 0.5)), InputError);
    CHECK_THROWS_AS(js_divergence(v2(-0.1, 1.1), v2(0.5, 0.5)), InputError);
    CHECK_THROWS_AS(js_divergence(v2(0.5, 0.5), Vec::Constant(3, 1.0 / 3)), InputError);

    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 500; ++i) {
        Vec p(4), q(4);
        for (int j = 0; j < 4; ++j) {
            p[j] = u(rng) < 0.2 ? 0.0 : u(rng);
            q[j] = u(rng);
        }
        p[0] += 1e-3;
        p /= p.sum();
        q /= q.sum();
        const double a = js_divergence(p, q);
        CHECK(a == js_divergence(q, p));
        CHECK(a >= 0.0);
        CHECK(a <= std::numbers::ln2);
        CHECK(a > 1e-12);
    }
}

TEST_CASE("detect_shift stays silent on stationary streams and during warm-up") {
    std::mt19937_64 rng(50);
    const int W = 32;
    for (int run = 0; run < 20; ++run) {
        std::vector<Vec> stream;
        const auto fixed = fixtures::noisy_one_hot(rng, 4, 1).weights;
        for (int i = 0; i < 300; ++i) stream.push_back(fixed);
        CHECK(fixtures::run_detector(stream, W, 0.05).empty());
    }
    // a violent change inside the first 2W samples never fires before 2W
    const auto stream = fixtures::planted_stream(rng, 2 * W - 1, 10, 4, 0, 3);
    CHECK(fixtures::run_detector(stream, W, 0.05).empty());
    auto st = ShiftDetectorState::make(4, W, 0.05);
    for (const auto& a : stream) detect_shift(st, AlphaWeights{a});
    CHECK(st.samples_seen == 2 * W - 1);
    CHECK(std::abs(st.current_hist.sum() - 1.0) < 1e-9);
    CHECK(std::abs(st.reference_hist.sum() - 1.0) < 1e-9);
}

TEST_CASE("detect_shift fires promptly and matches the offline replay") {
    std::mt19937_64 rng(51);
    const int W = 32;
    for (int run = 0; run < 50; ++run) {
        const long s = 80 + static_cast<long>(rng() % 60);
        const auto stream = fixtures::planted_stream(rng, s + 3 * W, s, 4, 0, 2);
        const auto online = fixtures::run_detector(stream, W, 0.05);
        CHECK(online == oracle::replay_shift(stream, W, 0.05));
        REQUIRE_FALSE(online.empty());
        CHECK(online.front() > s);
        CHECK(online.front() <= s + W);
    }
    CHECK_THROWS_AS(ShiftDetectorState::make(3, 32, 0.0), InputError);
    CHECK_THROWS_AS(ShiftDetectorState::make(3, 32, 0.8), InputError);
    auto st = ShiftDetectorState::make(3);
    CHECK_THROWS_AS(detect_shift(st, AlphaWeights{v2(0.5, 0.5)}), InputError);
}

TEST_CASE("policy_step") {
    ReallocPolicy p;
    p.logits = {0.3, -0.2, 0.1};
    p.baseline = 0.7;
    const auto same = policy_step(p, 0.7, Action::Merge);
    CHECK(same.logits == p.logits);

    ReallocPolicy q;
    double prev = q.probabilities()[0];
    for (int i = 0; i < 30; ++i) {
        q.baseline = 0.0;
        q = policy_step(q, 1.0, Action::Retain);
        const double now = q.probabilities()[0];
        CHECK(now > prev);
        prev = now;
    }
    CHECK_THROWS_AS(policy_step(p, NAN, Action::Retain), InputError);
}

TEST_CASE("policy_step follows the reference bandit exactly") {
    std::mt19937_64 rng(3);
    ReallocPolicy p;
    oracle::GradientBandit ref;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        const int arm = static_cast<int>(rng() % 3);
        const double r = u(rng);
        p = policy_step(p, r, kAllActions[static_cast<std::size_t>(arm)]);
        ref.update(arm, r);
    }
    for (int a = 0; a < 3; ++a) CHECK(p.logits[static_cast<std::size_t>(a)] == doctest::Approx(ref.h[a]).epsilon(1e-12));
    CHECK(p.baseline == doctest::Approx(ref.baseline).epsilon(1e-12));
}

TEST_CASE("policy learns the best arm of a fixed bandit") {
    int wins = 0;
    for (int seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
        ReallocPolicy p;
        const double reward[3] = {1.0, 0.2, 0.0};
        for (int i = 0; i < 500; ++i) {
            const Action a = sample_action(p, rng);
            p = policy_step(p, reward[static_cast<int>(a)], a);
        }
        wins += p.probabilities()[0] > 0.9;
    }
    CHECK(wins >= 90);
}

TEST_CASE("sample_action") {
    std::mt19937_64 rng(8);
    ReallocPolicy sat;
    sat.logits = {100, -100, -100};
    int retain = 0;
    for (int i = 0; i < 10000; ++i) retain += sample_action(sat, rng) == Action::Retain;
    CHECK(retain / 10000.0 > 0.999);

    ReallocPolicy flat;
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < 10000; ++i) ++counts[static_cast<int>(sample_action(flat, rng))];
    for (int c : counts) CHECK(std::abs(c / 10000.0 - 1.0 / 3) <= 0.02);

    std::mt19937_64 a(77), b(77);
    for (int i = 0; i < 200; ++i) CHECK(sample_action(flat, a) == sample_action(flat, b));
    CHECK(to_string(Action::Evict) == "EVICT");
}

TEST_CASE("apply_action") {
    MemoryState s;
    s.capacity = 4;
    s.step = 10;
    s.blocks = {block(0, v2(1, 0), {4}, 7), block(1, v2(0, 1), {1, 2, 3}, 3), block(2, v2(-1, 0.2), {9}, 5)};

    const auto r = apply_action(s, Action::Retain);
    CHECK_FALSE(r.degenerate);
    CHECK(r.state.step == 11);
    CHECK(fixtures::partition_of(r.state) == fixtures::partition_of(s));

    MemoryState two;
    two.capacity = 2;
    two.blocks = {block(0, v2(1, 0), {0}, 0), block(1, v2(0, 1), {1, 2, 3}, 0)};
    const auto m = apply_action(two, Action::Merge);
    REQUIRE(m.state.blocks.size() == 1);
    CHECK((m.state.blocks[0].centroid - v2(0.25, 0.75)).norm() < 1e-15);
    CHECK(m.state.blocks[0].member_tokens == std::vector<int>{0, 1, 2, 3});
    CHECK(m.state.blocks[0].block_id == 0);

    // evict: compare with a brute-force scan for the least recent block
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        MemoryState t;
        t.capacity = 6;
        std::vector<long> stamps{0, 1, 2, 3, 4, 5};
        std::shuffle(stamps.begin(), stamps.end(), rng);
        int token = 0;
        for (int i = 0; i < 6; ++i) {
            std::vector<int> members;
            for (int k = 0; k <= i % 3; ++k) members.push_back(token++);
            t.blocks.push_back(block(i, oracle::random_vec(rng, 2), members, stamps[static_cast<std::size_t>(i)]));
        }
        int victim = 0;
        for (int i = 1; i < 6; ++i)
            if (t.blocks[static_cast<std::size_t>(i)].last_used_step <
                t.blocks[static_cast<std::size_t>(victim)].last_used_step)
                victim = i;
        const auto e = apply_action(t, Action::Evict);
        CHECK(e.state.blocks.size() == 5);
        for (const auto& b : e.state.blocks) CHECK(b.block_id != victim);
        CHECK(e.state.total_members() ==
              t.total_members() - t.blocks[static_cast<std::size_t>(victim)].member_count());
        CHECK_NOTHROW(e.state.validate());

        const auto mm = apply_action(t, Action::Merge);
        CHECK(mm.state.total_members() == t.total_members());
        CHECK(mm.state.blocks.size() == 5);
        CHECK_NOTHROW(mm.state.validate());
    }
}

TEST_CASE("degenerate actions are recorded no-ops") {
    MemoryState empty;
    empty.capacity = 3;
    empty.step = 5;
    const auto e = apply_action(empty, Action::Evict);
    CHECK(e.degenerate);
    CHECK(e.state.step == 5);
    MemoryState one;
    one.capacity = 3;
    one.blocks = {block(0, v2(1, 0), {0}, 0)};
    const auto m = apply_action(one, Action::Merge, ShiftEvent{12, 0.2});
    CHECK(m.degenerate);
    CHECK(m.state.blocks.size() == 1);
    REQUIRE(m.event.has_value());
    CHECK(m.event->sample_index == 12);
}

TEST_CASE("alignment_audit") {
    std::mt19937_64 rng(66);
    const auto f = fixtures::random_transform(rng, 3, 2);
    auto stacks = fixtures::random_stacks(rng, 5, 3, 2);
    const auto aligned = rectify(stacks, f, 1.0);
    for (double x : alignment_audit(aligned, f).max_discrepancy) CHECK(x <= 1e-12);

    HierEmbedStack s;
    s.layers = {v2(1, 1), v2(4, 5)};
    s.query = v2(0, 0);
    s.keys = {v2(0, 0), v2(0, 0)};
    const std::vector<HierEmbedStack> one{s};
    CHECK(alignment_audit(one, LayerTransform::identity(2, 2)).max_discrepancy[0] == 5.0);

    const auto r = alignment_audit(stacks, f);
    for (std::size_t g = 0; g < 2; ++g) {
        double mx = 0.0, sum = 0.0;
        for (const auto& t : stacks) {
            const Vec diff = t.layers[g + 1] - f.weights[g] * t.layers[g] - f.biases[g];
            double n2 = 0.0;
            for (Eigen::Index i = 0; i < diff.size(); ++i) n2 += diff[i] * diff[i];
            mx = std::max(mx, std::sqrt(n2));
            sum += std::sqrt(n2);
        }
        CHECK(r.max_discrepancy[g] == doctest::Approx(mx).epsilon(1e-13));
        CHECK(r.mean_discrepancy[g] == doctest::Approx(sum / 5).epsilon(1e-13));
    }
    const std::vector<HierEmbedStack> flat = fixtures::random_stacks(rng, 2, 1, 2);
    CHECK_THROWS_AS(alignment_audit(flat, LayerTransform::identity(1, 2)), InputError);
}

TEST_CASE("rectify contracts every gap") {
    std::mt19937_64 rng(67);
    for (double eta : {0.25, 0.5, 1.0}) {
        const auto f = fixtures::random_transform(rng, 4, 3);
        const auto before = fixtures::random_stacks(rng, 6, 4, 3);
        const auto after = rectify(before, f, eta);
        for (std::size_t t = 0; t < before.size(); ++t)
            for (std::size_t g = 0; g < 3; ++g) {
                // measured against the already-updated lower layer
                const Vec proj = f.apply(g, after[t].layers[g]);
                const double pre = (before[t].layers[g + 1] - proj).norm();
                const double post = (after[t].layers[g + 1] - proj).norm();
                CHECK(std::abs(post - (1.0 - eta) * pre) <= 1e-9);
            }
    }
    std::vector<HierEmbedStack> s = fixtures::random_stacks(rng, 1, 2, 2);
    CHECK_THROWS_AS(rectify(s, LayerTransform::identity(2, 2), 0.0), InputError);
    CHECK_THROWS_AS(rectify(s, LayerTransform::identity(2, 2), 1.5), InputError);
}

TEST_CASE("rectify examples and geometric decay") {
    HierEmbedStack s;
    s.layers = {v2(1, 1), v2(4, 5)};
    s.query = v2(0, 0);
    s.keys = {v2(0, 0), v2(0, 0)};
    const auto f = LayerTransform::identity(2, 2);
    std::vector<HierEmbedStack> cur{s};
    const auto half = rectify(cur, f, 0.5);
    CHECK(std::abs(alignment_audit(half, f).max_discrepancy[0] - 2.5) <= 1e-9);
    for (int k = 1; k <= 12; ++k) {
        cur = rectify(cur, f, 0.5);
        CHECK(std::abs(alignment_audit(cur, f).max_discrepancy[0] - 5.0 * std::pow(0.5, k)) <= 1e-9);
    }
}

}  // TEST_SUITE
