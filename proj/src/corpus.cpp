#include "sida/corpus.hpp"

#include <algorithm>

namespace sida {
namespace {

/// Cumulative Zipf weights 1/(rank+1)^s for `n` ranks.
std::vector<double> zipf_cdf(std::size_t n, double exponent) {
    std::vector<double> cdf(n);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        total += 1.0 / std::pow(static_cast<double>(r + 1), exponent);
        cdf[r] = total;
    }
    for (double& c : cdf) c /= total;
    return cdf;
}

std::size_t sample_cdf(const std::vector<double>& cdf, Rng& rng) {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    return std::min(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

}  // namespace

void CorpusSpec::validate() const {
    require(vocab_size >= 3, "CorpusSpec: vocab_size must be >= 3");
    require(num_latent >= 1 && num_latent <= vocab_size - 1, "CorpusSpec: num_latent must be in [1, vocab_size - 1]");
    require(num_classes >= 1 && num_classes <= num_latent, "CorpusSpec: num_classes must be in [1, num_latent]");
    require(min_length >= 1 && min_length <= max_length, "CorpusSpec: need 1 <= min_length <= max_length");
    require(beta >= 0.0 && beta <= 1.0, "CorpusSpec: beta must be in [0, 1]");
    require(class_purity >= 0.0 && class_purity <= 1.0, "CorpusSpec: class_purity must be in [0, 1]");
}

Corpus Corpus::slice(std::size_t begin, std::size_t end) const {
    require(begin <= end && end <= sequences.size(), "Corpus::slice: bad range");
    Corpus out;
    out.spec = spec;
    out.token_group = token_group;
    out.sequences.assign(sequences.begin() + static_cast<std::ptrdiff_t>(begin), sequences.begin() + static_cast<std::ptrdiff_t>(end));
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
    out.latents.assign(latents.begin() + static_cast<std::ptrdiff_t>(begin), latents.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

Corpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    Corpus corpus;
    corpus.spec = spec;

    std::vector<TokenId> order;
    for (std::size_t v = 1; v < spec.vocab_size; ++v) order.push_back(static_cast<TokenId>(v));
    rng.shuffle(order);
    corpus.token_group.assign(spec.vocab_size, spec.num_latent);
    std::vector<std::vector<TokenId>> groups(spec.num_latent);
    for (std::size_t r = 0; r < order.size(); ++r) {
        corpus.token_group[order[r]] = r % spec.num_latent;
        groups[r % spec.num_latent].push_back(order[r]);
    }
    std::vector<std::vector<double>> group_cdf;
    for (const auto& g : groups) group_cdf.push_back(zipf_cdf(g.size(), spec.zipf_exponent));
    const auto global_cdf = zipf_cdf(order.size(), spec.zipf_exponent);

    std::vector<std::vector<std::size_t>> latents_of_class(spec.num_classes);
    for (std::size_t e = 0; e < spec.num_latent; ++e) latents_of_class[e % spec.num_classes].push_back(e);

    for (std::size_t s = 0; s < spec.num_sequences; ++s) {
        const std::size_t length = spec.min_length + rng.uniform_index(spec.max_length - spec.min_length + 1);
        const std::size_t dominant = rng.uniform_index(spec.num_classes);
        Sequence seq(length);
        std::vector<std::size_t> latent(length);
        std::vector<std::size_t> class_votes(spec.num_classes, 0);
        for (std::size_t t = 0; t < length; ++t) {
            const auto& pool = latents_of_class[dominant];
            latent[t] = rng.bernoulli(spec.class_purity) ? pool[rng.uniform_index(pool.size())] : rng.uniform_index(spec.num_latent);
            ++class_votes[latent[t] % spec.num_classes];
            if (rng.bernoulli(spec.beta))
                seq[t] = groups[latent[t]][sample_cdf(group_cdf[latent[t]], rng)];
            else
                seq[t] = order[sample_cdf(global_cdf, rng)];
        }
        corpus.labels.push_back(static_cast<std::size_t>(std::max_element(class_votes.begin(), class_votes.end()) - class_votes.begin()));
        corpus.sequences.push_back(std::move(seq));
        corpus.latents.push_back(std::move(latent));
    }
    return corpus;
}

std::vector<SequenceBatch> make_batches(const Corpus& corpus, std::size_t batch_size, std::uint64_t first_id) {
    require(batch_size >= 1, "make_batches: batch_size must be >= 1");
    std::vector<SequenceBatch> out;
    for (std::size_t start = 0; start < corpus.sequences.size(); start += batch_size) {
        SequenceBatch b;
        b.batch_id = first_id + out.size();
        const std::size_t end = std::min(corpus.sequences.size(), start + batch_size);
        for (std::size_t i = start; i < end; ++i) {
            b.sequences.push_back(corpus.sequences[i]);
            if (!corpus.labels.empty()) b.labels.push_back(corpus.labels[i]);
        }
        out.push_back(std::move(b));
    }
    return out;
}

nlohmann::json corpus_spec_to_json(const CorpusSpec& s) {
    return {{"vocab_size", s.vocab_size},   {"num_sequences", s.num_sequences}, {"min_length", s.min_length},
            {"max_length", s.max_length},   {"num_classes", s.num_classes},     {"num_latent", s.num_latent},
            {"beta", s.beta},               {"zipf_exponent", s.zipf_exponent}, {"class_purity", s.class_purity},
            {"seed", s.seed}};
}

CorpusSpec corpus_spec_from_json(const nlohmann::json& j, CorpusSpec s) {
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    s.num_sequences = j.value("num_sequences", s.num_sequences);
    s.min_length = j.value("min_length", s.min_length);
    s.max_length = j.value("max_length", s.max_length);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.num_latent = j.value("num_latent", s.num_latent);
    s.beta = j.value("beta", s.beta);
    s.zipf_exponent = j.value("zipf_exponent", s.zipf_exponent);
    s.class_purity = j.value("class_purity", s.class_purity);
    s.seed = j.value("seed", s.seed);
    return s;
}

nlohmann::json corpus_to_json(const Corpus& corpus) {
    nlohmann::json seqs = nlohmann::json::array();
    for (std::size_t i = 0; i < corpus.sequences.size(); ++i)
        seqs.push_back({{"tokens", corpus.sequences[i]}, {"label", corpus.labels[i]}, {"latent", corpus.latents[i]}});
    return {{"spec", corpus_spec_to_json(corpus.spec)}, {"token_group", corpus.token_group}, {"sequences", std::move(seqs)}};
}

Corpus corpus_from_json(const nlohmann::json& j) {
    Corpus corpus;
    corpus.spec = corpus_spec_from_json(j.at("spec"));
    corpus.token_group = j.at("token_group").get<std::vector<std::size_t>>();
    for (const auto& s : j.at("sequences")) {
        corpus.sequences.push_back(s.at("tokens").get<Sequence>());
        corpus.labels.push_back(s.at("label").get<std::size_t>());
        corpus.latents.push_back(s.value("latent", std::vector<std::size_t>{}));
    }
    return corpus;
}

}  // namespace sida
