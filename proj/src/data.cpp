#include "hiermem/harness.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace hiermem {

void ShiftStreamSpec::validate() const {
    require(segments >= 1, "stream: segments must be >= 1");
    require(classes >= 1, "stream: classes must be >= 1");
    require(topic_vocab >= classes, "stream: topic vocabulary too small to give every class a group");
    require(static_cast<long>(segments) * topic_vocab <= vocab,
            "stream: vocabulary too small to partition into " + std::to_string(segments) + " topics of " +
                std::to_string(topic_vocab));
    require(seq_len >= 1, "stream: seq_len must be >= 1");
    require(train_per_segment >= 1 && test_per_segment >= 1, "stream: examples per segment must be >= 1");
    require(signal >= 0.0 && signal <= 1.0, "stream: signal must lie in [0, 1]");
}

namespace {

std::vector<int> balanced_labels(int n, int classes, std::mt19937_64& rng) {
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % classes;
    std::shuffle(labels.begin(), labels.end(), rng);
    return labels;
}

struct Topic {
    int first_id;
    int size;
    std::vector<std::vector<int>> groups;  ///< ids over-represented for each label
};

Topic make_topic(int index, const ShiftStreamSpec& spec, std::mt19937_64& rng) {
    Topic t{index * spec.topic_vocab, spec.topic_vocab, {}};
    std::vector<int> ids(static_cast<std::size_t>(spec.topic_vocab));
    std::iota(ids.begin(), ids.end(), t.first_id);
    std::shuffle(ids.begin(), ids.end(), rng);
    const int per = spec.topic_vocab / spec.classes;
    t.groups.resize(static_cast<std::size_t>(spec.classes));
    for (int c = 0; c < spec.classes; ++c)
        t.groups[static_cast<std::size_t>(c)].assign(ids.begin() + c * per, ids.begin() + (c + 1) * per);
    // segment-specific label rule: which group stands for which class
    std::shuffle(t.groups.begin(), t.groups.end(), rng);
    return t;
}

Example draw(const Topic& topic, int label, int segment, const ShiftStreamSpec& spec, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<int> any(0, topic.size - 1);
    const auto& group = topic.groups[static_cast<std::size_t>(label)];
    std::uniform_int_distribution<std::size_t> pick(0, group.size() - 1);
    Example ex;
    ex.label = label;
    ex.segment = segment;
    for (int i = 0; i < spec.seq_len; ++i)
        ex.tokens.push_back(coin(rng) < spec.signal ? group[pick(rng)] : topic.first_id + any(rng));
    return ex;
}

}  // namespace

ShiftStream gen_shift_stream(const ShiftStreamSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    ShiftStream s;
    s.train.num_segments = spec.segments;
    s.test.num_segments = spec.segments;
    for (int seg = 0; seg < spec.segments; ++seg) {
        const Topic topic = make_topic(seg, spec, rng);
        if (seg > 0) {
            s.train.boundaries.push_back(s.train.examples.size());
            s.test.boundaries.push_back(s.test.examples.size());
        }
        for (int y : balanced_labels(spec.train_per_segment, spec.classes, rng))
            s.train.examples.push_back(draw(topic, y, seg, spec, rng));
        for (int y : balanced_labels(spec.test_per_segment, spec.classes, rng))
            s.test.examples.push_back(draw(topic, y, seg, spec, rng));
    }
    return s;
}

Dataset gen_memorization_set(int n, int seq_len, int vocab, int classes, std::uint64_t seed) {
    require(n >= 1 && seq_len >= 1 && vocab >= 1 && classes >= 1, "memorization set: sizes must be positive");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> any(0, vocab - 1);
    Dataset d;
    for (int y : balanced_labels(n, classes, rng)) {
        Example ex;
        ex.label = y;
        for (int i = 0; i < seq_len; ++i) ex.tokens.push_back(any(rng));
        d.examples.push_back(std::move(ex));
    }
    return d;
}

}  // namespace hiermem
