#pragma once

// Seeded synthetic corpus with known topic structure. Each topic owns a set
// of concepts, each concept has two surface forms; sentences combine three
// concepts of one topic through shared filler templates, so topics are
// separable only through their content words.

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "grace/errors.hpp"
#include "grace/rollout.hpp"

namespace grace {

struct CorpusOptions {
  std::size_t topics = 8;
  std::size_t docs_per_topic = 8;
  std::size_t queries_per_topic = 4;
  std::size_t sts_pairs = 96;
  std::uint64_t seed = 1000;
};

struct StsPair {
  std::string a;
  std::string b;
  double score = 0.0;  // 1 paraphrase, 0.5 same topic, 0 otherwise
  int duplicate = 0;   // 1 iff paraphrase
};

struct SyntheticCorpus {
  std::size_t topics = 0;
  std::vector<std::string> documents;
  std::vector<std::size_t> doc_topic;
  std::vector<std::string> queries;
  std::vector<std::size_t> query_topic;
  std::vector<std::set<std::size_t>> relevant;  // per query, document ids
  std::vector<StsPair> sts;
};

namespace corpus_detail {

inline constexpr std::size_t kMaxTopics = 8;
inline constexpr std::size_t kConcepts = 8;

// [topic][concept] = {surface form 0, surface form 1}
inline constexpr std::array<std::array<std::array<const char*, 2>, kConcepts>, kMaxTopics>
    kLexicon = {{
        {{{"star", "sun"}, {"planet", "world"}, {"orbit", "path"}, {"comet", "meteor"},
          {"telescope", "lens"}, {"galaxy", "nebula"}, {"moon", "satellite"},
          {"astronomer", "stargazer"}}},
        {{{"oven", "stove"}, {"flour", "dough"}, {"recipe", "dish"}, {"pepper", "spice"},
          {"chef", "cook"}, {"soup", "broth"}, {"knife", "blade"}, {"butter", "cream"}}},
        {{{"boat", "ship"}, {"sail", "canvas"}, {"harbor", "port"}, {"anchor", "mooring"},
          {"captain", "skipper"}, {"wave", "swell"}, {"mast", "spar"}, {"sailor", "crew"}}},
        {{{"guitar", "lute"}, {"melody", "tune"}, {"drum", "rhythm"}, {"choir", "chorus"},
          {"violin", "fiddle"}, {"concert", "recital"}, {"song", "ballad"},
          {"composer", "songwriter"}}},
        {{{"doctor", "physician"}, {"fever", "illness"}, {"clinic", "hospital"},
          {"nurse", "caregiver"}, {"vaccine", "medicine"}, {"patient", "sufferer"},
          {"surgery", "operation"}, {"pill", "tablet"}}},
        {{{"bank", "lender"}, {"loan", "credit"}, {"market", "exchange"}, {"stock", "share"},
          {"budget", "ledger"}, {"investor", "trader"}, {"tax", "levy"}, {"profit", "gain"}}},
        {{{"garden", "yard"}, {"seed", "sprout"}, {"soil", "earth"}, {"flower", "blossom"},
          {"rose", "tulip"}, {"weed", "thistle"}, {"shovel", "spade"}, {"gardener", "grower"}}},
        {{{"computer", "machine"}, {"program", "software"}, {"server", "host"},
          {"keyboard", "keypad"}, {"database", "datastore"}, {"compiler", "toolchain"},
          {"network", "internet"}, {"coder", "programmer"}}},
    }};

inline constexpr std::array<const char*, 6> kDocTemplates = {
    "the {0} was near the {1} and the {2}",
    "we talked about {0}, {1} and {2} today",
    "a short note on the {0} with the {1} and some {2}",
    "my {0} needs a new {1} before the {2}",
    "how does the {0} relate to the {1} and the {2}?",
    "i read that the {0} and the {1} depend on the {2}",
};

inline constexpr std::array<const char*, 3> kQueryTemplates = {
    "{0} and {1}?",
    "what about the {0} and the {1}",
    "looking for {0} with {1}",
};

struct Content {
  std::size_t topic;
  std::array<std::size_t, 3> concepts;
};

inline std::string render(const char* tmpl, const std::vector<std::string>& words) {
  std::string out;
  for (const char* p = tmpl; *p; ++p) {
    if (*p == '{' && p[1] >= '0' && p[1] <= '9' && p[2] == '}') {
      out += words.at(static_cast<std::size_t>(p[1] - '0'));
      p += 2;
    } else {
      out += *p;
    }
  }
  return out;
}

class Generator {
 public:
  Generator(std::size_t topics, std::uint64_t seed) : topics_(topics), rng_(seed) {
    if (topics == 0 || topics > kMaxTopics) {
      throw ConfigError("corpus topics must be in [1, " + std::to_string(kMaxTopics) + "]");
    }
  }

  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

  Content content(std::size_t topic) {
    std::array<std::size_t, kConcepts> perm;
    for (std::size_t i = 0; i < kConcepts; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng_);
    return {topic, {perm[0], perm[1], perm[2]}};
  }

  std::string word(const Content& c, std::size_t slot) {
    return kLexicon[c.topic][c.concepts[slot]][below(2)];
  }

  std::string document(const Content& c, std::size_t avoid_template = kDocTemplates.size()) {
    std::size_t t = below(kDocTemplates.size());
    if (t == avoid_template) t = (t + 1) % kDocTemplates.size();
    last_template_ = t;
    return render(kDocTemplates[t], {word(c, 0), word(c, 1), word(c, 2)});
  }

  std::string query(const Content& c) {
    const std::size_t a = below(3);
    const std::size_t b = (a + 1 + below(2)) % 3;
    return render(kQueryTemplates[below(kQueryTemplates.size())], {word(c, a), word(c, b)});
  }

  std::size_t last_template() const { return last_template_; }
  std::size_t topics() const { return topics_; }

 private:
  std::size_t topics_;
  std::mt19937_64 rng_;
  std::size_t last_template_ = 0;
};

}  // namespace corpus_detail

/// Documents and queries per topic; every query is relevant to all documents
/// of its topic. STS pairs are split evenly between paraphrases, same-topic
/// pairs and cross-topic pairs.
inline SyntheticCorpus make_corpus(const CorpusOptions& opt) {
  corpus_detail::Generator gen(opt.topics, opt.seed);
  SyntheticCorpus c;
  c.topics = opt.topics;
  for (std::size_t t = 0; t < opt.topics; ++t)
    for (std::size_t i = 0; i < opt.docs_per_topic; ++i) {
      c.documents.push_back(gen.document(gen.content(t)));
      c.doc_topic.push_back(t);
    }
  for (std::size_t t = 0; t < opt.topics; ++t)
    for (std::size_t i = 0; i < opt.queries_per_topic; ++i) {
      c.queries.push_back(gen.query(gen.content(t)));
      c.query_topic.push_back(t);
      std::set<std::size_t> rel;
      for (std::size_t d = 0; d < c.documents.size(); ++d)
        if (c.doc_topic[d] == t) rel.insert(d);
      c.relevant.push_back(std::move(rel));
    }
  for (std::size_t p = 0; p < opt.sts_pairs; ++p) {
    StsPair pair;
    const std::size_t t = gen.below(opt.topics);
    const auto ca = gen.content(t);
    pair.a = gen.document(ca);
    switch (p % 3) {
      case 0:
        pair.b = gen.document(ca, gen.last_template());
        pair.score = 1.0;
        pair.duplicate = 1;
        break;
      case 1:
        pair.b = gen.document(gen.content(t));
        pair.score = 0.5;
        break;
      default: {
        const std::size_t u = opt.topics > 1 ? (t + 1 + gen.below(opt.topics - 1)) % opt.topics : t;
        pair.b = gen.document(gen.content(u));
        pair.score = u == t ? 0.5 : 0.0;
        break;
      }
    }
    c.sts.push_back(std::move(pair));
  }
  return c;
}

/// (query, positive, negatives) triples: the positive shares the query's
/// topic, each negative comes from a different topic.
inline std::vector<TrainingInstance> make_training_triples(std::size_t n, std::size_t negatives,
                                                           std::size_t topics,
                                                           std::uint64_t seed) {
  corpus_detail::Generator gen(topics, seed);
  if (topics < 2) throw ConfigError("training triples need at least two topics");
  std::vector<TrainingInstance> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = i % topics;
    TrainingInstance inst;
    inst.query = gen.query(gen.content(t));
    inst.positive = gen.document(gen.content(t));
    for (std::size_t m = 0; m < negatives; ++m) {
      const std::size_t u = (t + 1 + gen.below(topics - 1)) % topics;
      inst.negatives.push_back(gen.document(gen.content(u)));
    }
    out.push_back(std::move(inst));
  }
  return out;
}

inline std::vector<std::string> make_raw_texts(std::size_t n, std::size_t topics,
                                               std::uint64_t seed) {
  corpus_detail::Generator gen(topics, seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen.document(gen.content(i % topics)));
  return out;
}

}  // namespace grace
