#include "doctest.h"

#include "lowsup/lm.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace lowsup;

namespace {

std::vector<std::vector<std::string>> corpus(std::initializer_list<const char*> lines) {
  std::vector<std::vector<std::string>> out;
  for (auto* l : lines) out.push_back(word_tokens(l));
  return out;
}

std::vector<std::vector<std::string>> random_corpus(std::uint64_t seed, int sentences, int symbols) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len(0, 8), sym(0, symbols - 1);
  std::vector<std::vector<std::string>> out;
  for (int i = 0; i < sentences; ++i) {
    std::vector<std::string> s;
    int n = len(rng);
    for (int j = 0; j < n; ++j) s.push_back(std::string(1, static_cast<char>('a' + sym(rng))));
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("maximum-likelihood unigram counts") {
  NgramOptions o;
  o.order = 1;
  o.smoothing = Smoothing::none;
  o.sentence_boundaries = false;
  auto lm = train_ngram(corpus({"a b a"}), o);
  CHECK(std::pow(10.0, lm.cond_log10({}, lm.find("a"))) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(std::pow(10.0, lm.cond_log10({}, lm.find("b"))) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("uniform unigram corpus gives equal probabilities") {
  NgramOptions o;
  o.order = 1;
  auto lm = train_ngram(corpus({"a b c d"}), o);
  double pa = lm.cond_log10({}, lm.find("a"));
  for (const char* s : {"b", "c", "d", NgramLm::kEos}) CHECK(lm.cond_log10({}, lm.find(s)) == doctest::Approx(pa));
  CHECK_THROWS_AS(train_ngram({}, o), ValidationError);
}

TEST_CASE("hand-computed Witten-Bell bigram") {
  // Corpus "a b" / "a" / "b b"; the fractions below are worked out by hand.
  NgramOptions o;
  o.order = 2;
  auto lm = train_ngram(corpus({"a b", "a", "b b"}), o);
  std::vector<int> s{lm.bos()}, a{lm.find("a")}, b{lm.find("b")};
  auto p = [&](const std::vector<int>& h, const char* w) { return std::pow(10.0, lm.cond_log10(h, lm.find(w))); };
  CHECK(p({}, "a") == doctest::Approx(3.0 / 11));
  CHECK(p({}, "b") == doctest::Approx(4.0 / 11));
  CHECK(p(s, "a") == doctest::Approx(28.0 / 55));
  CHECK(p(s, "</s>") == doctest::Approx(8.0 / 55));
  CHECK(p(a, "a") == doctest::Approx(6.0 / 44));
  CHECK(p(b, "a") == doctest::Approx(6.0 / 55));
  double expect = std::log10(28.0 / 55 * 6.0 / 44 * 19.0 / 44 * 30.0 / 55);
  CHECK(std::abs(lm.score(word_tokens("a a b")).log10_prob - expect) < 1e-4);
  CHECK(std::abs(lm.score({}).log10_prob - std::log10(8.0 / 55)) < 1e-4);
  CHECK(lm.max_normalization_error() < 1e-6);
}

TEST_CASE("hand-written ARPA file follows backoff semantics") {
  const char* arpa =
      "\\data\\\nngram 1=4\nngram 2=2\n\n"
      "\\1-grams:\n-99\t<s>\t-0.5\n-0.3\ta\t-0.2\n-0.6\tb\n-0.4\t</s>\n\n"
      "\\2-grams:\n-0.1\t<s> a\n-0.7\ta b\n\n\\end\\\n";
  auto lm = NgramLm::from_arpa(arpa);
  CHECK(lm.order() == 2);
  // <s> a: -0.1; a b: -0.7; b </s>: backoff(b)=0 + p(</s>) = -0.4
  CHECK(std::abs(lm.score({"a", "b"}).log10_prob - (-0.1 - 0.7 - 0.4)) < 1e-4);
  // <s> b: -0.5 + -0.6; b a: 0 + -0.3; a </s>: -0.2 + -0.4
  CHECK(std::abs(lm.score({"b", "a"}).log10_prob - (-1.1 - 0.3 - 0.6)) < 1e-4);
  auto sc = lm.score({"zz"});
  CHECK(sc.oov == 1);
  CHECK(sc.log10_prob == doctest::Approx(NgramLm::kOovLog10 - 0.4));
  CHECK_THROWS_AS(NgramLm::from_arpa("\\data\\\nngram 1=3\n\n\\1-grams:\n-1 a\n\\end\\\n"), ValidationError);
}

TEST_CASE("chain rule bookkeeping") {
  NgramOptions o;
  auto lm = train_ngram(random_corpus(3, 40, 4), o);
  std::vector<std::string> seq{"a", "c", "b", "b", "d", "a"};
  double step = 0;
  std::vector<int> hist{lm.bos()};
  for (auto& t : seq) {
    step += lm.cond_log10(hist, lm.find(t));
    hist.push_back(lm.find(t));
  }
  step += lm.cond_log10(hist, lm.eos());
  CHECK(lm.score(seq).log10_prob == doctest::Approx(step).epsilon(1e-14));
}

TEST_CASE("trained models are normalized and survive ARPA round trip") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    NgramOptions o;
    o.order = 1 + static_cast<int>(seed % 4);
    o.smoothing = seed % 5 == 4 ? Smoothing::none : Smoothing::witten_bell;
    if (seed % 3 == 0) o.vocabulary = {"q", "r"};
    auto text = random_corpus(seed, 30, 5);
    auto lm = train_ngram(text, o);
    CHECK(lm.max_normalization_error() < 1e-6);
    auto back = NgramLm::from_arpa(lm.to_arpa());
    CHECK(back.max_normalization_error() < 1e-6);
    for (const auto& s : random_corpus(seed + 100, 10, 5))
      CHECK(std::abs(back.score(s).log10_prob - lm.score(s).log10_prob) < 1e-9);
  }
  auto path = (std::filesystem::temp_directory_path() / "lowsup_lm_test.arpa").string();
  NgramOptions o;
  auto lm = train_ngram(random_corpus(1, 20, 3), o);
  write_arpa(lm, path);
  CHECK(load_arpa(path).to_arpa() == lm.to_arpa());
  std::filesystem::remove(path);
}

TEST_CASE("higher order fits lower-order data at least as well") {
  // Unigram-generated data: skewed symbol distribution, no context dependence.
  std::mt19937_64 rng(11);
  std::discrete_distribution<int> d({5, 3, 1, 1});
  std::vector<std::vector<std::string>> text;
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> s;
    for (int j = 0; j < 6; ++j) s.push_back(std::string(1, static_cast<char>('a' + d(rng))));
    text.push_back(s);
  }
  auto ll = [&](int order) {
    NgramOptions o;
    o.order = order;
    auto lm = train_ngram(text, o);
    double total = 0;
    int n = 0;
    for (auto& s : text) {
      auto sc = lm.score(s);
      total += sc.log10_prob;
      n += sc.tokens;
    }
    return total / n;
  };
  double l1 = ll(1), l2 = ll(2), l3 = ll(3);
  CHECK(l2 >= l1 - 1e-6);
  CHECK(l3 >= l2 - 1e-6);
}

TEST_CASE("lexicon parsing and validation") {
  auto lex = parse_lexicon("# comment\ncat\tc a t\ndog\td o g\ncat\tc a t\n");
  CHECK(lex.entries.size() == 2);
  CHECK(lex.entries.at("cat") == std::vector<std::string>{"c", "a", "t"});
  CHECK(parse_lexicon(serialize_lexicon(lex)).entries == lex.entries);
  std::vector<std::string> chars{"c", "a", "t"};
  try {
    parse_lexicon("cat\tc a t\nçat\tç a t\n", &chars);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_lexicon("cat\tc a t\ncat\tk a t\n"), ValidationError);
  CHECK_THROWS_AS(parse_lexicon("cat\t\n"), ValidationError);
  auto from = lexicon_from_texts({"ab ba", "ab"});
  CHECK(from.entries.size() == 2);
  CHECK(char_tokens("a b") == std::vector<std::string>{"a", kSpaceToken, "b"});
}
