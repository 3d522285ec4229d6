#include "hiermem/model.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <random>

namespace hiermem {

namespace {

std::size_t frontend_count(const ModelConfig& c, int layers) {
    const auto d = static_cast<std::size_t>(c.d);
    std::size_t n = static_cast<std::size_t>(layers) * d * static_cast<std::size_t>(c.vocab);
    if (layers > 1 || c.use_hierarchy) {
        const auto L = static_cast<std::size_t>(layers);
        n += 2 * d * d + d * L + (L - 1) * (d * d + d);
    }
    return n;
}

std::size_t ffn_unit(const ModelConfig& c) {
    return static_cast<std::size_t>(c.attn_layers) * (2 * static_cast<std::size_t>(c.d) + 1);
}

std::size_t body_count(const ModelConfig& c, int hidden) {
    const auto d = static_cast<std::size_t>(c.d);
    const auto h = static_cast<std::size_t>(hidden);
    return static_cast<std::size_t>(c.attn_layers) * (4 * d * d + 2 * d * h + h + d) +
           static_cast<std::size_t>(c.classes) * (d + 1);
}

}  // namespace

int ModelConfig::effective_ffn_hidden() const {
    if (use_hierarchy || L <= 1) return ffn_hidden;
    ModelConfig full = *this;
    full.use_hierarchy = true;
    const std::size_t missing = frontend_count(full, L) - frontend_count(*this, 1);
    const std::size_t unit = ffn_unit(*this);
    return ffn_hidden + static_cast<int>((missing + unit / 2) / unit);
}

void ModelConfig::validate() const {
    require(d >= 1 && L >= 1 && attn_layers >= 1 && vocab >= 1 && classes >= 1 && ffn_hidden >= 1,
            "model config: sizes must be positive");
    require(heads == 1, "model config: only single-head attention is supported");
    require(temperature > 0.0 && std::isfinite(temperature), "model config: temperature must be positive");
}

std::size_t parameter_count(const ModelConfig& cfg) {
    return frontend_count(cfg, cfg.layers()) + body_count(cfg, cfg.effective_ffn_hidden());
}

ModelConfig baseline_config(const ModelConfig& full) {
    ModelConfig b = full;
    b.use_hierarchy = false;
    b.use_memory = false;
    return b;
}

void check_parameter_budget(const ModelConfig& a, const ModelConfig& b, double tolerance) {
    const double pa = static_cast<double>(parameter_count(a));
    const double pb = static_cast<double>(parameter_count(b));
    require(std::abs(pa - pb) <= tolerance * std::max(pa, pb),
            "parameter budgets differ by more than " + std::to_string(tolerance * 100.0) + "%: " +
                std::to_string(static_cast<long long>(pa)) + " vs " + std::to_string(static_cast<long long>(pb)));
}

std::size_t ModelParams::size() const {
    std::size_t n = 0;
    visit([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
}

ModelParams ModelParams::zeros_like() const {
    ModelParams z = *this;
    z.visit([](const std::string&, auto& t) { t.setZero(); });
    return z;
}

Vec ModelParams::flat() const {
    Vec out(static_cast<Eigen::Index>(size()));
    Eigen::Index pos = 0;
    visit([&](const std::string&, const auto& t) {
        out.segment(pos, t.size()) = Eigen::Map<const Vec>(t.data(), t.size());
        pos += t.size();
    });
    return out;
}

void ModelParams::set_flat(const Vec& v) {
    require(v.size() == static_cast<Eigen::Index>(size()), "set_flat: size mismatch");
    Eigen::Index pos = 0;
    visit([&](const std::string&, auto& t) {
        Eigen::Map<Vec>(t.data(), t.size()) = v.segment(pos, t.size());
        pos += t.size();
    });
}

HierEmbedStack ModelParams::stack_for(int token) const {
    require(token >= 0 && token < config.vocab, "token id out of vocabulary");
    HierEmbedStack s;
    s.token_id = token;
    const auto L = embed.size();
    Vec mean = Vec::Zero(config.d);
    for (const auto& table : embed) {
        s.layers.push_back(table.col(token));
        mean += s.layers.back();
    }
    mean /= static_cast<double>(L);
    if (config.use_hierarchy) {
        s.query = hier_q * mean;
        const Vec base = hier_k * mean;
        for (std::size_t l = 0; l < L; ++l) s.keys.push_back(base + key_bias.col(static_cast<Eigen::Index>(l)));
    } else {
        s.query = Vec::Zero(config.d);
        s.keys.assign(L, Vec::Zero(config.d));
    }
    return s;
}

ModelParams init_params(const ModelConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    auto gauss = [&](Eigen::Index r, Eigen::Index c, double sd) {
        std::normal_distribution<double> n(0.0, sd);
        Mat m(r, c);
        for (Eigen::Index j = 0; j < c; ++j)
            for (Eigen::Index i = 0; i < r; ++i) m(i, j) = n(rng);
        return m;
    };
    const int d = cfg.d;
    const int h = cfg.effective_ffn_hidden();
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));

    ModelParams p;
    p.config = cfg;
    // a near-uniform mix of L independent tables shrinks by sqrt(L); undo that
    const double embed_sd = sd * std::sqrt(static_cast<double>(cfg.layers()));
    for (int l = 0; l < cfg.layers(); ++l) p.embed.push_back(gauss(d, cfg.vocab, embed_sd));
    if (cfg.use_hierarchy) {
        p.hier_q = gauss(d, d, sd);
        p.hier_k = gauss(d, d, sd);
        p.key_bias = gauss(d, cfg.L, 1.0);
        p.transform = LayerTransform::identity(static_cast<std::size_t>(cfg.L), d);
    }
    for (int i = 0; i < cfg.attn_layers; ++i) {
        AttnBlock b;
        b.wq = gauss(d, d, sd);
        b.wk = gauss(d, d, sd);
        b.wv = gauss(d, d, sd);
        b.wo = gauss(d, d, 0.5 * sd);
        b.w1 = gauss(h, d, std::sqrt(2.0 / d));
        b.b1 = Vec::Zero(h);
        b.w2 = gauss(d, h, 0.5 / std::sqrt(static_cast<double>(h)));
        b.b2 = Vec::Zero(d);
        p.blocks.push_back(std::move(b));
    }
    p.head_w = gauss(cfg.classes, d, sd);
    p.head_b = Vec::Zero(cfg.classes);
    return p;
}

std::vector<Mat> ForwardPass::attention() const {
    std::vector<Mat> out;
    for (const auto& l : layers) out.push_back(l.attn);
    return out;
}

long long attention_op_count(long long T, std::optional<long long> B, int attn_layers) {
    require(T >= 1 && (!B || *B >= 1) && attn_layers >= 1, "attention_op_count: sizes must be positive");
    return static_cast<long long>(attn_layers) * T * (B ? *B : T);
}

namespace {

void softmax_columns(Mat& s) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        const double top = s.col(j).maxCoeff();
        s.col(j) = (s.col(j).array() - top).exp();
        s.col(j) /= s.col(j).sum();
    }
}

long long macs(const Mat& a, const Mat& b) { return static_cast<long long>(a.rows()) * a.cols() * b.cols(); }

}  // namespace

ForwardPass forward(const ModelParams& params, std::span<const int> tokens, const MemoryState* memory) {
    const auto& cfg = params.config;
    require(!tokens.empty(), "forward: empty sequence");
    for (int t : tokens) require(t >= 0 && t < cfg.vocab, "forward: token id out of vocabulary");

    ForwardPass fp;
    fp.tokens.assign(tokens.begin(), tokens.end());
    const auto T = static_cast<Eigen::Index>(tokens.size());
    const int d = cfg.d;
    fp.embedded.resize(d, T);
    for (Eigen::Index t = 0; t < T; ++t) {
        fp.stacks.push_back(params.stack_for(tokens[static_cast<std::size_t>(t)]));
        const auto& s = fp.stacks.back();
        if (cfg.use_hierarchy) {
            fp.alphas.push_back(layer_weights(s.query, s.keys, cfg.temperature));
            fp.embedded.col(t) = combine(fp.alphas.back(), s.layers);
            fp.ops.mac_count += 2LL * d * d + static_cast<long long>(s.num_layers()) * 2 * d;
        } else {
            fp.alphas.push_back(AlphaWeights{Vec::Ones(1)});
            fp.embedded.col(t) = s.layers.front();
        }
    }

    // key slots shared by every attention layer
    std::vector<int> group;
    std::vector<int> group_sizes;
    if (memory) {
        std::vector<int> slot_of_block(memory->blocks.size(), -1);
        group.assign(static_cast<std::size_t>(T), -1);
        for (Eigen::Index t = 0; t < T; ++t) {
            const int b = memory->find_block(tokens[static_cast<std::size_t>(t)]);
            if (b < 0) continue;
            auto& slot = slot_of_block[static_cast<std::size_t>(b)];
            if (slot < 0) {
                slot = static_cast<int>(group_sizes.size());
                group_sizes.push_back(0);
            }
            group[static_cast<std::size_t>(t)] = slot;
            ++group_sizes[static_cast<std::size_t>(slot)];
        }
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Mat x = fp.embedded;
    for (const auto& blk : params.blocks) {
        LayerCache c;
        c.x_in = x;
        c.group = group;
        c.group_sizes = group_sizes;
        if (memory) {
            c.source = Mat::Zero(d, static_cast<Eigen::Index>(group_sizes.size()));
            for (Eigen::Index t = 0; t < T; ++t)
                if (group[static_cast<std::size_t>(t)] >= 0) c.source.col(group[static_cast<std::size_t>(t)]) += x.col(t);
            for (Eigen::Index g = 0; g < c.source.cols(); ++g) c.source.col(g) /= group_sizes[static_cast<std::size_t>(g)];
        } else {
            c.source = x;
        }
        c.q = blk.wq * x;
        c.k = blk.wk * c.source;
        c.v = blk.wv * c.source;
        fp.ops.mac_count += macs(blk.wq, x) + macs(blk.wk, c.source) + macs(blk.wv, c.source);

        const Eigen::Index keys = c.source.cols();
        fp.ops.scored_pairs += static_cast<long long>(keys) * T;
        if (keys > 0) {
            c.attn = (c.k.transpose() * c.q) * scale;
            softmax_columns(c.attn);
            c.out = c.v * c.attn;
            fp.ops.mac_count += 2LL * keys * T * d;
        } else {
            c.attn = Mat(0, T);
            c.out = Mat::Zero(d, T);
        }
        c.x_mid = x + blk.wo * c.out;
        c.pre = blk.w1 * c.x_mid;
        c.pre.colwise() += blk.b1;
        c.hidden = c.pre.cwiseMax(0.0);
        Mat ffn = blk.w2 * c.hidden;
        ffn.colwise() += blk.b2;
        x = c.x_mid + ffn;
        fp.ops.mac_count += macs(blk.wo, c.out) + macs(blk.w1, c.x_mid) + macs(blk.w2, c.hidden);
        fp.layers.push_back(std::move(c));
    }
    fp.pooled = x.rowwise().mean();
    fp.logits = params.head_w * fp.pooled + params.head_b;
    fp.ops.mac_count += static_cast<long long>(params.head_w.size());
    return fp;
}

namespace {

double log_softmax_at(const Vec& z, int k, Vec* probs) {
    const double top = z.maxCoeff();
    const Vec e = (z.array() - top).exp();
    const double s = e.sum();
    if (probs) *probs = e / s;
    return z[k] - top - std::log(s);
}

/// Accumulates d(loss)/d(params) for one example given the forward cache and
/// the upstream gradient on the logits, plus the embedding-space gradients
/// coming from the auxiliary objectives.
void backward(const ModelParams& p, const ForwardPass& fp, const Vec& dlogits, const LossGradients* aux,
              double scale, ModelParams& g) {
    const auto& cfg = p.config;
    const int d = cfg.d;
    const auto T = static_cast<Eigen::Index>(fp.tokens.size());
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(d));

    g.head_w += scale * dlogits * fp.pooled.transpose();
    g.head_b += scale * dlogits;
    const Vec dpool = p.head_w.transpose() * dlogits;
    Mat dx = (dpool / static_cast<double>(T)).replicate(1, T) * scale;

    for (std::size_t i = p.blocks.size(); i-- > 0;) {
        const auto& blk = p.blocks[i];
        const auto& c = fp.layers[i];
        auto& gb = g.blocks[i];

        gb.w2 += dx * c.hidden.transpose();
        gb.b2 += dx.rowwise().sum();
        const Mat dpre = (blk.w2.transpose() * dx).cwiseProduct((c.pre.array() > 0.0).cast<double>().matrix());
        gb.w1 += dpre * c.x_mid.transpose();
        gb.b1 += dpre.rowwise().sum();
        const Mat dmid = dx + blk.w1.transpose() * dpre;

        gb.wo += dmid * c.out.transpose();
        Mat dx_in = dmid;
        if (c.attn.rows() > 0) {
            const Mat dout = blk.wo.transpose() * dmid;
            const Mat dv = dout * c.attn.transpose();
            const Mat dattn = c.v.transpose() * dout;
            Mat ds(c.attn.rows(), c.attn.cols());
            for (Eigen::Index j = 0; j < T; ++j) {
                const double inner = c.attn.col(j).dot(dattn.col(j));
                ds.col(j) = c.attn.col(j).cwiseProduct((dattn.col(j).array() - inner).matrix());
            }
            ds *= att_scale;
            const Mat dk = c.q * ds.transpose();
            const Mat dq = c.k * ds;
            gb.wq += dq * c.x_in.transpose();
            gb.wk += dk * c.source.transpose();
            gb.wv += dv * c.source.transpose();
            dx_in += blk.wq.transpose() * dq;
            const Mat dsrc = blk.wk.transpose() * dk + blk.wv.transpose() * dv;
            if (c.group.empty()) {
                dx_in += dsrc;
            } else {
                for (Eigen::Index t = 0; t < T; ++t) {
                    const int slot = c.group[static_cast<std::size_t>(t)];
                    if (slot >= 0) dx_in.col(t) += dsrc.col(slot) / c.group_sizes[static_cast<std::size_t>(slot)];
                }
            }
        }
        dx = std::move(dx_in);
    }

    // embedding frontend
    const double aux_scale = scale;
    for (Eigen::Index t = 0; t < T; ++t) {
        const int tok = fp.tokens[static_cast<std::size_t>(t)];
        const auto& s = fp.stacks[static_cast<std::size_t>(t)];
        const Vec de = dx.col(t);
        if (!cfg.use_hierarchy) {
            g.embed[0].col(tok) += de;
            if (aux) g.embed[0].col(tok) += aux_scale * aux->stacks[static_cast<std::size_t>(t)].layers[0];
            continue;
        }
        const auto& alpha = fp.alphas[static_cast<std::size_t>(t)];
        const auto L = s.num_layers();
        std::vector<Vec> dlayer(L);
        Vec galpha(static_cast<Eigen::Index>(L));
        for (std::size_t l = 0; l < L; ++l) {
            dlayer[l] = alpha[l] * de;
            galpha[static_cast<Eigen::Index>(l)] = s.layers[l].dot(de);
        }
        Vec dq = alpha_jacobian(s.query, s.keys, cfg.temperature).transpose() * galpha;
        std::vector<Vec> dk = alpha_key_grads(s.query, alpha, galpha, cfg.temperature);
        if (aux) {
            const auto& a = aux->stacks[static_cast<std::size_t>(t)];
            for (std::size_t l = 0; l < L; ++l) {
                dlayer[l] += aux_scale * a.layers[l];
                dk[l] += aux_scale * a.keys[l];
            }
            dq += aux_scale * a.query;
        }
        Vec mean = Vec::Zero(d);
        for (const auto& v : s.layers) mean += v;
        mean /= static_cast<double>(L);
        g.hier_q += dq * mean.transpose();
        Vec dmean = p.hier_q.transpose() * dq;
        for (std::size_t l = 0; l < L; ++l) {
            g.hier_k += dk[l] * mean.transpose();
            g.key_bias.col(static_cast<Eigen::Index>(l)) += dk[l];
            dmean += p.hier_k.transpose() * dk[l];
        }
        for (std::size_t l = 0; l < L; ++l)
            g.embed[l].col(tok) += dlayer[l] + dmean / static_cast<double>(L);
    }
    if (aux && cfg.use_hierarchy) {
        for (std::size_t gap = 0; gap < g.transform.gaps(); ++gap) {
            g.transform.weights[gap] += aux_scale * aux->transform.weights[gap];
            g.transform.biases[gap] += aux_scale * aux->transform.biases[gap];
        }
    }
}

}  // namespace

StepResult batch_gradient(const ModelParams& params, std::span<const Example> batch, const TrainOptions& opts,
                          const MemoryState* memory, ModelParams& grad) {
    require(!batch.empty(), "train_step: empty batch");
    grad = params.zeros_like();
    StepResult r;
    const double scale = 1.0 / static_cast<double>(batch.size());
    const bool want_aux = opts.weights.embed != 0.0 || opts.weights.hier != 0.0;
    for (const auto& ex : batch) {
        require(ex.label >= 0 && ex.label < params.config.classes, "train_step: label out of range");
        ForwardPass fp = forward(params, ex.tokens, memory);
        Vec probs;
        const double nll = -log_softmax_at(fp.logits, ex.label, &probs);
        Vec dlogits = probs;
        dlogits[ex.label] -= 1.0;

        std::optional<LossGradients> aux;
        if (want_aux) {
            aux = loss_gradients(fp.stacks, params.config.use_hierarchy ? params.transform : LayerTransform{},
                                 opts.embed, opts.weights, std::nullopt, params.config.temperature);
            r.embed_loss += scale * aux->embed;
            r.hier_loss += scale * aux->hier;
        }
        r.task_loss += scale * nll;
        r.ops.scored_pairs += fp.ops.scored_pairs;
        r.ops.mac_count += fp.ops.mac_count;

        Vec mean_alpha = Vec::Zero(fp.alphas.front().weights.size());
        for (const auto& a : fp.alphas) mean_alpha += a.weights;
        r.mean_alphas.push_back(AlphaWeights{mean_alpha / static_cast<double>(fp.alphas.size())});

        backward(params, fp, dlogits, aux ? &*aux : nullptr, scale, grad);
    }
    r.total_loss = total_loss(r.task_loss, r.embed_loss, r.hier_loss, opts.weights);
    return r;
}

StepResult train_step(ModelParams& params, std::span<const Example> batch, ModelParams& velocity,
                      const TrainOptions& opts, const MemoryState* memory) {
    ModelParams grad;
    StepResult r = batch_gradient(params, batch, opts, memory, grad);
    if (!std::isfinite(r.total_loss))
        throw NonFiniteLoss("non-finite loss " + std::to_string(r.total_loss) + " (task " +
                            std::to_string(r.task_loss) + ")");
    Vec v = opts.momentum * velocity.flat() + grad.flat();
    velocity.set_flat(v);
    if (opts.lr != 0.0) params.set_flat(params.flat() - opts.lr * v);
    return r;
}

EvalResult evaluate(const ModelParams& params, std::span<const Example> data, int num_segments,
                    const MemoryState* memory) {
    require(!data.empty(), "evaluate: empty dataset");
    require(num_segments >= 1, "evaluate: need at least one segment");
    EvalResult r;
    std::vector<int> correct(static_cast<std::size_t>(num_segments), 0);
    r.segment_counts.assign(static_cast<std::size_t>(num_segments), 0);
    int hits = 0;
    for (const auto& ex : data) {
        require(ex.segment >= 0 && ex.segment < num_segments, "evaluate: segment label out of range");
        const ForwardPass fp = forward(params, ex.tokens, memory);
        Eigen::Index best = 0;
        fp.logits.maxCoeff(&best);
        const bool ok = static_cast<int>(best) == ex.label;
        hits += ok;
        correct[static_cast<std::size_t>(ex.segment)] += ok;
        ++r.segment_counts[static_cast<std::size_t>(ex.segment)];
        r.mean_loss -= log_softmax_at(fp.logits, ex.label, nullptr);
    }
    r.accuracy = static_cast<double>(hits) / static_cast<double>(data.size());
    r.mean_loss /= static_cast<double>(data.size());
    for (std::size_t s = 0; s < correct.size(); ++s)
        r.segment_accuracy.push_back(r.segment_counts[s] > 0
                                         ? static_cast<double>(correct[s]) / r.segment_counts[s]
                                         : std::numeric_limits<double>::quiet_NaN());
    return r;
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"d", c.d},
            {"L", c.L},
            {"heads", c.heads},
            {"attn_layers", c.attn_layers},
            {"vocab", c.vocab},
            {"classes", c.classes},
            {"ffn_hidden", c.ffn_hidden},
            {"use_memory", c.use_memory},
            {"use_hierarchy", c.use_hierarchy},
            {"temperature", c.temperature},
            {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d = j.at("d");
    c.L = j.at("L");
    c.heads = j.at("heads");
    c.attn_layers = j.at("attn_layers");
    c.vocab = j.at("vocab");
    c.classes = j.at("classes");
    c.ffn_hidden = j.at("ffn_hidden");
    c.use_memory = j.at("use_memory");
    c.use_hierarchy = j.at("use_hierarchy");
    c.temperature = j.at("temperature");
    c.seed = j.at("seed");
    return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    nlohmann::json j;
    j["format_version"] = kCheckpointVersion;
    j["config"] = config_to_json(params.config);
    nlohmann::json tensors = nlohmann::json::object();
    params.visit([&](const std::string& name, const auto& t) {
        tensors[name] = {{"rows", t.rows()},
                         {"cols", t.cols()},
                         {"data", std::vector<double>(t.data(), t.data() + t.size())}};
    });
    j["params"] = std::move(tensors);
    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write checkpoint " + path.string());
    out << j.dump() << '\n';
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "cannot read checkpoint " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed checkpoint: ") + e.what());
    }
    require(j.contains("format_version") && j["format_version"] == kCheckpointVersion,
            "checkpoint format version mismatch (expected " + std::to_string(kCheckpointVersion) + ")");
    ModelParams p = init_params(config_from_json(j.at("config")));
    const auto& tensors = j.at("params");
    p.visit([&](const std::string& name, auto& t) {
        require(tensors.contains(name), "checkpoint missing tensor " + name);
        const auto& e = tensors[name];
        require(e.at("rows") == t.rows() && e.at("cols") == t.cols(), "checkpoint shape mismatch for " + name);
        const auto data = e.at("data").template get<std::vector<double>>();
        require(data.size() == static_cast<std::size_t>(t.size()), "checkpoint size mismatch for " + name);
        std::copy(data.begin(), data.end(), t.data());
    });
    return p;
}

}  // namespace hiermem
