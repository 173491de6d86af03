#include "ildlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "ildlab/errors.hpp"

namespace ildlab {

namespace {

constexpr std::size_t kPairTemplates = 4;
// Probability that a content token is drawn from its segment's designated
// group rather than the whole content vocabulary.
constexpr double kSignalStrength = 0.7;
constexpr double kPairSignalStrength = 0.75;

std::size_t content_vocab(const TaskSpec& spec) {
    return spec.vocab_size - FIRST_CONTENT_ID;
}

std::size_t group_count(const TaskSpec& spec) {
    return spec.family == TaskFamily::SingleSentence ? spec.num_classes
                                                     : kPairTemplates;
}

std::vector<std::vector<std::size_t>> group_members(const TaskSpec& spec,
                                                    const std::vector<std::size_t>& table) {
    std::vector<std::vector<std::size_t>> members(group_count(spec));
    for (std::size_t tok = FIRST_CONTENT_ID; tok < spec.vocab_size; ++tok)
        members[table[tok]].push_back(tok);
    return members;
}

std::size_t draw_content_token(const TaskSpec& spec,
                               const std::vector<std::vector<std::size_t>>& members,
                               std::size_t group, double signal, Rng& rng) {
    if (rng.uniform() < signal && !members[group].empty())
        return members[group][rng.uniform_int(members[group].size())];
    return FIRST_CONTENT_ID + rng.uniform_int(content_vocab(spec));
}

std::size_t jittered_content_len(std::size_t target, std::size_t reserved,
                                 std::size_t nominal, std::size_t min_content,
                                 Rng& rng) {
    const long long base = static_cast<long long>(target) -
                           static_cast<long long>(reserved) +
                           static_cast<long long>(rng.uniform_int(5)) - 2;
    const long long lo = static_cast<long long>(min_content);
    const long long hi = static_cast<long long>(nominal - reserved);
    return static_cast<std::size_t>(std::max(lo, std::min(hi, base)));
}

Example finish_example(const TaskSpec& spec, std::vector<std::size_t> body,
                       std::size_t label) {
    Example ex;
    ex.tokens = std::move(body);
    ex.tokens.resize(spec.nominal_seq_len, PAD_ID);
    ex.mask.resize(spec.nominal_seq_len);
    for (std::size_t i = 0; i < spec.nominal_seq_len; ++i)
        ex.mask[i] = ex.tokens[i] == PAD_ID ? 0.0 : 1.0;
    ex.label = label;
    ex.clean_label = label;
    return ex;
}

Example generate_single(const TaskSpec& spec, const std::vector<std::size_t>& table,
                        const std::vector<std::vector<std::size_t>>& members, Rng& rng) {
    const std::size_t n_content =
        jittered_content_len(spec.effective_len_target, 1, spec.nominal_seq_len, 1, rng);
    const std::size_t intended = rng.uniform_int(spec.num_classes);
    for (int attempt = 0; attempt < 100; ++attempt) {
        std::vector<std::size_t> body{CLS_ID};
        std::vector<std::size_t> counts(spec.num_classes, 0);
        for (std::size_t k = 0; k < n_content; ++k) {
            const std::size_t tok =
                draw_content_token(spec, members, intended, kSignalStrength, rng);
            body.push_back(tok);
            ++counts[table[tok]];
        }
        std::size_t best = 0;
        bool tie = false;
        for (std::size_t c = 1; c < spec.num_classes; ++c) {
            if (counts[c] > counts[best]) {
                best = c;
                tie = false;
            } else if (counts[c] == counts[best]) {
                tie = true;
            }
        }
        if (tie)
            continue; // ambiguous majority: redraw so the rule stays exact
        return finish_example(spec, std::move(body), best);
    }
    throw DataError("generate_task: could not draw an unambiguous example");
}

Example generate_pair(const TaskSpec& spec, const std::vector<std::size_t>&,
                      const std::vector<std::vector<std::size_t>>& members, Rng& rng) {
    const std::size_t n_content =
        jittered_content_len(spec.effective_len_target, 2, spec.nominal_seq_len, 2, rng);
    const std::size_t n_a = 1 + rng.uniform_int(n_content - 1);
    const std::size_t n_b = n_content - n_a;
    const bool same = rng.uniform() < 0.5;
    const std::size_t t_a = rng.uniform_int(kPairTemplates);
    std::size_t t_b = t_a;
    if (!same) {
        t_b = rng.uniform_int(kPairTemplates - 1);
        if (t_b >= t_a)
            ++t_b;
    }
    std::vector<std::size_t> body{CLS_ID};
    for (std::size_t k = 0; k < n_a; ++k)
        body.push_back(draw_content_token(spec, members, t_a, kPairSignalStrength, rng));
    body.push_back(SEP_ID);
    for (std::size_t k = 0; k < n_b; ++k)
        body.push_back(draw_content_token(spec, members, t_b, kPairSignalStrength, rng));
    return finish_example(spec, std::move(body), same ? 1 : 0);
}

void resample_labels(std::vector<Example>& pool, double p, Rng& rng,
                     std::size_t num_classes) {
    const std::size_t n_flip =
        static_cast<std::size_t>(std::llround(p * static_cast<double>(pool.size())));
    std::vector<std::size_t> order = rng.permutation(pool.size());
    for (std::size_t k = 0; k < n_flip; ++k)
        pool[order[k]].label = rng.uniform_int(num_classes);
}

} // namespace

std::size_t reserved_tokens(TaskFamily family) {
    return family == TaskFamily::SingleSentence ? 1 : 2;
}

void TaskSpec::validate() const {
    const std::size_t reserved = reserved_tokens(family);
    if (nominal_seq_len < reserved + 1)
        throw ConfigError("task spec: nominal length leaves no room for content");
    if (effective_len_target > nominal_seq_len)
        throw ConfigError("task spec: effective length target exceeds nominal length");
    if (effective_len_target < reserved + 1)
        throw ConfigError("task spec: effective length target below " +
                          std::to_string(reserved + 1));
    if (num_classes < 2)
        throw ConfigError("task spec: need at least two classes");
    if (family == TaskFamily::SentencePair && num_classes != 2)
        throw ConfigError("task spec: pair tasks are binary");
    const std::size_t groups =
        family == TaskFamily::SingleSentence ? num_classes : kPairTemplates;
    if (vocab_size < FIRST_CONTENT_ID + 4 * groups)
        throw ConfigError("task spec: vocabulary too small for " +
                          std::to_string(groups) + " token groups");
    if (dataset_size < 5)
        throw ConfigError("task spec: dataset too small to split");
    if (similarity_rho < 0.0 || similarity_rho > 1.0)
        throw ConfigError("task spec: similarity knob outside [0,1]");
    if (label_noise_rate < 0.0 || label_noise_rate > 1.0)
        throw ConfigError("task spec: label noise rate outside [0,1]");
    if (regression && label_noise_rate > 0.0)
        throw ConfigError("task spec: label noise undefined for regression");
}

std::vector<std::size_t> rule_groups(const TaskSpec& spec) {
    spec.validate();
    const std::size_t groups = group_count(spec);
    const char* purpose = spec.family == TaskFamily::SingleSentence
                              ? "rule_groups"
                              : "rule_templates";
    std::vector<std::size_t> table(spec.vocab_size, 0);
    Rng rng = Rng::stream(spec.rule_seed, purpose);
    for (int attempt = 0; attempt < 100; ++attempt) {
        std::vector<std::size_t> seen(groups, 0);
        for (std::size_t tok = FIRST_CONTENT_ID; tok < spec.vocab_size; ++tok) {
            table[tok] = rng.uniform_int(groups);
            ++seen[table[tok]];
        }
        if (*std::min_element(seen.begin(), seen.end()) > 0)
            break;
    }
    if (spec.similarity_rho > 0.0) {
        Rng perturb = Rng::stream(spec.perturb_seed, "rule_perturb");
        const std::size_t n_content = content_vocab(spec);
        const std::size_t n_resample = static_cast<std::size_t>(
            std::llround(spec.similarity_rho * static_cast<double>(n_content)));
        std::vector<std::size_t> order = perturb.permutation(n_content);
        for (std::size_t k = 0; k < n_resample; ++k)
            table[FIRST_CONTENT_ID + order[k]] = perturb.uniform_int(groups);
    }
    return table;
}

Dataset generate_task(const TaskSpec& spec, std::uint64_t data_seed) {
    spec.validate();
    if (spec.regression)
        throw ConfigError("generate_task: regression tasks are not generated at this "
                          "scale");
    const std::vector<std::size_t> table = rule_groups(spec);
    const auto members = group_members(spec, table);
    Rng rng = Rng::stream(data_seed, "task_data");

    Dataset ds;
    ds.spec = spec;
    const std::size_t dev_count = std::max<std::size_t>(1, spec.dataset_size / 5);
    const std::size_t train_count = spec.dataset_size - dev_count;
    for (std::size_t i = 0; i < spec.dataset_size; ++i) {
        Example ex = spec.family == TaskFamily::SingleSentence
                         ? generate_single(spec, table, members, rng)
                         : generate_pair(spec, table, members, rng);
        if (i < train_count)
            ds.train.push_back(std::move(ex));
        else
            ds.dev.push_back(std::move(ex));
    }
    if (spec.label_noise_rate > 0.0) {
        Rng noise = Rng::stream(data_seed, "label_noise");
        resample_labels(ds.train, spec.label_noise_rate, noise, spec.num_classes);
    }
    return ds;
}

Dataset inject_label_noise(const Dataset& ds, double p, Rng& rng) {
    if (ds.spec.regression)
        throw ConfigError("inject_label_noise: regression labels cannot be resampled");
    if (p < 0.0 || p > 1.0)
        throw ConfigError("inject_label_noise: rate outside [0,1]");
    Dataset out = ds;
    resample_labels(out.train, p, rng, out.spec.num_classes);
    out.spec.label_noise_rate = p;
    return out;
}

Dataset downsample(const Dataset& ds, std::size_t n, Rng& rng) {
    if (n == 0)
        throw DataError("downsample: empty train split requested");
    if (n > ds.train.size())
        throw DataError("downsample: " + std::to_string(n) + " requested from " +
                        std::to_string(ds.train.size()) + " examples");
    Dataset out;
    out.spec = ds.spec;
    out.dev = ds.dev;
    std::vector<std::size_t> order = rng.permutation(ds.train.size());
    out.train.reserve(n);
    for (std::size_t k = 0; k < n; ++k)
        out.train.push_back(ds.train[order[k]]);
    out.spec.dataset_size = out.train.size() + out.dev.size();
    return out;
}

TaskSpec supplementary_spec(const TaskSpec& target, std::size_t size,
                            std::size_t effective_len, double rho, Rng& rng) {
    TaskSpec spec = target;
    spec.dataset_size = size;
    spec.effective_len_target = effective_len;
    spec.similarity_rho = rho;
    spec.perturb_seed = rng.next_u64();
    spec.label_noise_rate = 0.0;
    spec.validate();
    return spec;
}

Dataset make_supplementary(const TaskSpec& target, std::size_t size,
                           std::size_t effective_len, double rho, Rng& rng,
                           std::uint64_t data_seed) {
    return generate_task(supplementary_spec(target, size, effective_len, rho, rng),
                         data_seed);
}

Batch gather_batch(const std::vector<Example>& pool,
                   const std::vector<std::size_t>& order, std::size_t begin,
                   std::size_t count) {
    if (count == 0)
        throw DataError("gather_batch: empty batch");
    if (begin + count > order.size())
        throw DataError("gather_batch: slice past the end of the order");
    const std::size_t seq = pool.at(order[begin]).tokens.size();
    Batch b;
    b.batch_size = count;
    b.seq_len = seq;
    b.tokens.reserve(count * seq);
    b.mask.reserve(count * seq);
    for (std::size_t k = 0; k < count; ++k) {
        const Example& ex = pool.at(order[begin + k]);
        if (ex.tokens.size() != seq)
            throw DataError("gather_batch: inconsistent sequence lengths");
        b.tokens.insert(b.tokens.end(), ex.tokens.begin(), ex.tokens.end());
        b.mask.insert(b.mask.end(), ex.mask.begin(), ex.mask.end());
        b.labels.push_back(ex.label);
        b.clean_labels.push_back(ex.clean_label);
    }
    b.validate();
    return b;
}

namespace {

nlohmann::json spec_to_json(const TaskSpec& s) {
    return {{"family", s.family == TaskFamily::SingleSentence ? "single" : "pair"},
            {"rule_seed", s.rule_seed},
            {"perturb_seed", s.perturb_seed},
            {"vocab_size", s.vocab_size},
            {"num_classes", s.num_classes},
            {"nominal_seq_len", s.nominal_seq_len},
            {"effective_len_target", s.effective_len_target},
            {"dataset_size", s.dataset_size},
            {"similarity_rho", s.similarity_rho},
            {"label_noise_rate", s.label_noise_rate},
            {"regression", s.regression}};
}

TaskSpec spec_from_json(const nlohmann::json& j) {
    TaskSpec s;
    const std::string family = j.at("family").get<std::string>();
    if (family == "single")
        s.family = TaskFamily::SingleSentence;
    else if (family == "pair")
        s.family = TaskFamily::SentencePair;
    else
        throw DataError("dataset header: unknown family '" + family + "'");
    s.rule_seed = j.at("rule_seed").get<std::uint64_t>();
    s.perturb_seed = j.at("perturb_seed").get<std::uint64_t>();
    s.vocab_size = j.at("vocab_size").get<std::size_t>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.nominal_seq_len = j.at("nominal_seq_len").get<std::size_t>();
    s.effective_len_target = j.at("effective_len_target").get<std::size_t>();
    s.dataset_size = j.at("dataset_size").get<std::size_t>();
    s.similarity_rho = j.at("similarity_rho").get<double>();
    s.label_noise_rate = j.at("label_noise_rate").get<double>();
    s.regression = j.at("regression").get<bool>();
    return s;
}

void write_examples(std::ofstream& out, const std::vector<Example>& pool,
                    const char* split) {
    for (const Example& ex : pool) {
        nlohmann::json j;
        j["tokens"] = ex.tokens;
        nlohmann::json mask = nlohmann::json::array();
        for (double m : ex.mask)
            mask.push_back(m != 0.0 ? 1 : 0);
        j["mask"] = mask;
        j["label"] = ex.label;
        j["clean_label"] = ex.clean_label;
        j["split"] = split;
        out << j.dump() << "\n";
    }
}

} // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream out(path);
    if (!out)
        throw DataError("save_dataset: cannot open " + path);
    nlohmann::json header;
    header["task_spec"] = spec_to_json(ds.spec);
    out << header.dump() << "\n";
    write_examples(out, ds.train, "train");
    write_examples(out, ds.dev, "dev");
    if (!out)
        throw DataError("save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw DataError("load_dataset: cannot open " + path);
    std::string line;
    if (!std::getline(in, line))
        throw DataError("load_dataset: empty file " + path);
    Dataset ds;
    try {
        const auto header = nlohmann::json::parse(line);
        ds.spec = spec_from_json(header.at("task_spec"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_dataset: bad header: " + std::string(e.what()));
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            continue;
        try {
            const auto j = nlohmann::json::parse(line);
            Example ex;
            ex.tokens = j.at("tokens").get<std::vector<std::size_t>>();
            for (const auto& m : j.at("mask"))
                ex.mask.push_back(m.get<int>() != 0 ? 1.0 : 0.0);
            ex.label = j.at("label").get<std::size_t>();
            ex.clean_label = j.at("clean_label").get<std::size_t>();
            if (ex.tokens.size() != ex.mask.size())
                throw DataError("tokens and mask lengths differ");
            const std::string split = j.at("split").get<std::string>();
            if (split == "train")
                ds.train.push_back(std::move(ex));
            else if (split == "dev")
                ds.dev.push_back(std::move(ex));
            else
                throw DataError("unknown split '" + split + "'");
        } catch (const nlohmann::json::exception& e) {
            throw DataError("load_dataset: line " + std::to_string(line_no) + ": " +
                            e.what());
        }
    }
    return ds;
}

} // namespace ildlab
