#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ildlab/batch.hpp"
#include "ildlab/rng.hpp"

namespace ildlab {

enum class TaskFamily { SingleSentence, SentencePair };

// Full recipe for one synthetic task. Generation is a pure function of
// (spec, data seed); the hidden labeling rule is a pure function of
// (family, rule_seed, perturb_seed, similarity_rho, vocab, classes).
struct TaskSpec {
    TaskFamily family = TaskFamily::SingleSentence;
    std::uint64_t rule_seed = 0;
    std::uint64_t perturb_seed = 0; // used only when similarity_rho > 0
    std::size_t vocab_size = 64;
    std::size_t num_classes = 2;
    std::size_t nominal_seq_len = 32;
    std::size_t effective_len_target = 24; // mean non-pad tokens, specials included
    std::size_t dataset_size = 1000;       // total examples; dev takes 20%
    double similarity_rho = 0.0;           // fraction of rule assignments resampled
    double label_noise_rate = 0.0;
    bool regression = false;

    void validate() const;
};

std::size_t reserved_tokens(TaskFamily family);

struct Example {
    std::vector<std::size_t> tokens;
    std::vector<double> mask;
    std::size_t label = 0;
    std::size_t clean_label = 0;
};

struct Dataset {
    TaskSpec spec;
    std::vector<Example> train;
    std::vector<Example> dev;
};

// The labeling rule's token-group table: index = token id, value = group
// (class marker group for the single-sentence family, latent template for
// the pair family). Special tokens map to group 0 and never influence
// labels. Exposed so audits can compare rules directly.
std::vector<std::size_t> rule_groups(const TaskSpec& spec);

Dataset generate_task(const TaskSpec& spec, std::uint64_t data_seed);

// Resamples round(p * train size) training labels uniformly over all
// classes (realized flip rate p * (C-1)/C). Dev split untouched.
Dataset inject_label_noise(const Dataset& ds, double p, Rng& rng);

// Uniform sample of n training examples without replacement.
Dataset downsample(const Dataset& ds, std::size_t n, Rng& rng);

// Spec for a supplementary task tied to the target's rule: same family
// and geometry, rule resampled in a rho fraction of its assignments, with
// independently chosen size and effective length.
TaskSpec supplementary_spec(const TaskSpec& target, std::size_t size,
                            std::size_t effective_len, double rho, Rng& rng);
Dataset make_supplementary(const TaskSpec& target, std::size_t size,
                           std::size_t effective_len, double rho, Rng& rng,
                           std::uint64_t data_seed);

// Assembles pool[order[begin]], ..., pool[order[begin + count - 1]] into a
// padded batch.
Batch gather_batch(const std::vector<Example>& pool,
                   const std::vector<std::size_t>& order, std::size_t begin,
                   std::size_t count);

// JSONL: header line carrying the task spec, then one record per example
// with tokens, mask, label, clean_label, split. Round-trips exactly.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

} // namespace ildlab
