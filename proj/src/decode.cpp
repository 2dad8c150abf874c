#include "lowsup/decode.hpp"

#include "lowsup/ctc.hpp"
#include "lowsup/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

namespace lowsup {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
const double kLn10 = std::numbers::ln10;
}  // namespace

std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::ctc_greedy: return "ctc_greedy";
    case DecodeMode::ctc_beam_lm: return "ctc_beam_lm";
    case DecodeMode::joint_attention: return "joint_attention";
  }
  return "?";
}

DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "ctc_greedy") return DecodeMode::ctc_greedy;
  if (s == "ctc_beam_lm") return DecodeMode::ctc_beam_lm;
  if (s == "joint_attention") return DecodeMode::joint_attention;
  throw ValidationError("unknown decode mode '" + s + "'");
}

int DecodeConfig::effective_beam() const {
  if (beam_size > 0) return beam_size;
  return mode == DecodeMode::ctc_beam_lm ? 16 : 8;
}

void DecodeConfig::validate() const {
  if (beam_size < 0) throw ValidationError("beam_size must be at least 1");
  if (!(lm_weight >= 0)) throw ValidationError("lm_weight must be non-negative");
  if (!(ctc_weight_decode >= 0 && ctc_weight_decode <= 1)) throw ValidationError("ctc_weight_decode must lie in [0, 1]");
  if (nbest < 1) throw ValidationError("nbest must be at least 1");
}

double hypothesis_confidence(double score_total, std::size_t labels) {
  if (!std::isfinite(score_total)) return 0.0;
  return std::min(1.0, std::exp(score_total / static_cast<double>(std::max<std::size_t>(1, labels))));
}

namespace {

void finish(Hypothesis& h, const Vocabulary& vocab) {
  h.text = trim(vocab.decode(h.labels));
  h.words = static_cast<int>(split_ws(h.text).size());
  h.confidence = hypothesis_confidence(h.score_total, h.labels.size());
}

}  // namespace

Hypothesis ctc_greedy(const Mat& lp, const Vocabulary& vocab) {
  Hypothesis h;
  int prev = -1;
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    Eigen::Index arg;
    h.score_acoustic += lp.row(t).maxCoeff(&arg);
    int a = static_cast<int>(arg);
    if (a != prev && a != Vocabulary::kBlank) h.labels.push_back(a);
    prev = a;
  }
  // Non-character outputs (sos/eos, unk) are dropped from the text but kept out of labels too.
  std::erase_if(h.labels, [](int x) { return x < Vocabulary::kNumSpecial; });
  h.score_total = h.score_acoustic;
  finish(h, vocab);
  return h;
}

// ------------------------------------------------------------ prefix search

namespace {

struct Trie {
  struct Node {
    std::map<int, int> next;
    std::string word;  // non-empty when a lexicon word ends here
  };
  std::vector<Node> nodes{Node{}};

  void add(const std::vector<int>& ids, const std::string& word) {
    int n = 0;
    for (int c : ids) {
      auto it = nodes[static_cast<std::size_t>(n)].next.find(c);
      if (it == nodes[static_cast<std::size_t>(n)].next.end()) {
        nodes.push_back(Node{});
        int id = static_cast<int>(nodes.size()) - 1;
        nodes[static_cast<std::size_t>(n)].next[c] = id;
        n = id;
      } else {
        n = it->second;
      }
    }
    auto& w = nodes[static_cast<std::size_t>(n)].word;
    if (w.empty() || word < w) w = word;
  }
};

struct Beam {
  double pb = kNegInf;
  double pnb = kNegInf;
  // Lexicon state.
  int node = 0;
  std::vector<int> history;  // LM ids of completed words (bos first when used)
  double lm = 0.0;           // ln
  int words = 0;

  double acoustic() const { return log_add(pb, pnb); }
};

struct Constraint {
  const Trie* trie = nullptr;
  const NgramLm* lm = nullptr;
  int space = -1;
};

double word_lm(const Constraint& c, const std::vector<int>& hist, const std::string& word, int* id_out) {
  if (!c.lm) {
    *id_out = -1;
    return 0.0;
  }
  int id = c.lm->find(word);
  *id_out = id;
  return kLn10 * c.lm->cond_log10(hist, id);
}

using BeamMap = std::map<std::vector<int>, Beam>;

BeamMap prefix_search(const Mat& lp, int beam, const Constraint* con, double lm_weight, double length_penalty) {
  const int v = static_cast<int>(lp.cols());
  BeamMap beams;
  Beam init;
  init.pb = 0.0;
  if (con && con->lm && con->lm->sentence_boundaries()) init.history.push_back(con->lm->bos());
  beams[{}] = init;
  auto rank = [&](const Beam& b) { return b.acoustic() + lm_weight * b.lm + length_penalty * b.words; };
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    BeamMap next;
    for (const auto& [prefix, b] : beams) {
      double total = b.acoustic();
      {
        auto [it, fresh] = next.try_emplace(prefix, b);
        if (fresh) it->second.pb = it->second.pnb = kNegInf;
        it->second.pb = log_add(it->second.pb, total + lp(t, Vocabulary::kBlank));
        if (!prefix.empty()) it->second.pnb = log_add(it->second.pnb, b.pnb + lp(t, prefix.back()));
      }
      for (int c = Vocabulary::kNumSpecial; c < v; ++c) {
        Beam state = b;
        if (con) {
          const auto& node = con->trie->nodes[static_cast<std::size_t>(b.node)];
          if (c == con->space) {
            if (prefix.empty() || prefix.back() == con->space || node.word.empty()) continue;
            int id;
            state.lm += word_lm(*con, b.history, node.word, &id);
            state.history.push_back(id);
            state.node = 0;
            ++state.words;
          } else {
            auto it = node.next.find(c);
            if (it == node.next.end()) continue;
            state.node = it->second;
          }
        }
        std::vector<int> ext = prefix;
        ext.push_back(c);
        double add = (!prefix.empty() && prefix.back() == c ? b.pb : total) + lp(t, c);
        auto [it, fresh] = next.try_emplace(std::move(ext), state);
        if (fresh) it->second.pb = it->second.pnb = kNegInf;
        it->second.pnb = log_add(it->second.pnb, add);
      }
    }
    // Prune.
    std::vector<std::pair<double, const std::vector<int>*>> order;
    order.reserve(next.size());
    for (const auto& [p, b] : next)
      if (std::isfinite(b.acoustic())) order.emplace_back(rank(b), &p);
    if (static_cast<int>(order.size()) > beam) {
      std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      BeamMap kept;
      for (int i = 0; i < beam; ++i) kept.emplace(*order[static_cast<std::size_t>(i)].second, next.at(*order[static_cast<std::size_t>(i)].second));
      beams = std::move(kept);
    } else {
      BeamMap kept;
      for (auto& [r, p] : order) kept.emplace(*p, next.at(*p));
      beams = std::move(kept);
    }
  }
  return beams;
}

void sort_hyps(std::vector<Hypothesis>& hs) {
  std::stable_sort(hs.begin(), hs.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.score_total != b.score_total) return a.score_total > b.score_total;
    return a.labels < b.labels;
  });
}

}  // namespace

std::vector<Hypothesis> ctc_prefix_beam(const Mat& lp, const Vocabulary& vocab, int beam) {
  if (beam < 1) throw ValidationError("beam_size must be at least 1");
  auto beams = prefix_search(lp, beam, nullptr, 0.0, 0.0);
  std::vector<Hypothesis> out;
  for (const auto& [p, b] : beams) {
    Hypothesis h;
    h.labels = p;
    h.score_acoustic = b.acoustic();
    h.score_total = h.score_acoustic;
    finish(h, vocab);
    out.push_back(std::move(h));
  }
  sort_hyps(out);
  return out;
}

std::vector<Hypothesis> ctc_beam_lm(const Mat& lp, const Vocabulary& vocab, const Lexicon& lexicon,
                                    const NgramLm* word_lm_ptr, const DecodeConfig& cfg) {
  cfg.validate();
  if (lexicon.empty()) throw ValidationError("empty lexicon");
  Trie trie;
  for (const auto& [word, chars] : lexicon.entries) {
    std::vector<int> ids;
    for (const auto& ch : chars) {
      auto id = vocab.find(ch);
      if (!id) throw ValidationError("lexicon character '" + ch + "' of word " + word + " not in the model vocabulary");
      ids.push_back(*id);
    }
    trie.add(ids, word);
  }
  Constraint con;
  con.trie = &trie;
  con.lm = word_lm_ptr;
  auto sp = vocab.find(lexicon.word_boundary);
  con.space = sp ? *sp : -1;
  auto beams = prefix_search(lp, cfg.effective_beam(), &con, cfg.lm_weight, cfg.length_penalty);

  std::vector<Hypothesis> out;
  for (const auto& [p, b] : beams) {
    Beam s = b;
    if (!p.empty()) {
      if (p.back() == con.space) continue;
      const auto& node = trie.nodes[static_cast<std::size_t>(s.node)];
      if (node.word.empty()) continue;
      int id;
      s.lm += word_lm(con, s.history, node.word, &id);
      s.history.push_back(id);
      ++s.words;
    }
    if (word_lm_ptr && word_lm_ptr->sentence_boundaries()) s.lm += kLn10 * word_lm_ptr->cond_log10(s.history, word_lm_ptr->eos());
    Hypothesis h;
    h.labels = p;
    h.score_acoustic = s.acoustic();
    h.score_lm = s.lm;
    h.words = s.words;
    h.score_total = h.score_acoustic + cfg.lm_weight * h.score_lm + cfg.length_penalty * h.words;
    finish(h, vocab);
    h.words = s.words;
    out.push_back(std::move(h));
  }
  if (out.empty()) {
    Hypothesis h;
    h.search_failed = true;
    h.score_total = h.score_acoustic = kNegInf;
    h.confidence = 0.0;
    return {h};
  }
  sort_hyps(out);
  return out;
}

// ------------------------------------------------------------ joint decoding

namespace {

struct CtcPrefixState {
  std::vector<double> rn, rb;  // paths ending in a non-blank / blank at each frame
  double psi = 0.0;            // prefix log-probability
};

CtcPrefixState ctc_initial(const Mat& lp) {
  const auto t_len = static_cast<std::size_t>(lp.rows());
  CtcPrefixState s;
  s.rn.assign(t_len, kNegInf);
  s.rb.assign(t_len, kNegInf);
  double acc = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    acc += lp(static_cast<Eigen::Index>(t), Vocabulary::kBlank);
    s.rb[t] = acc;
  }
  s.psi = 0.0;
  return s;
}

CtcPrefixState ctc_extend(const Mat& lp, const CtcPrefixState& g, int last, int c) {
  const auto t_len = static_cast<std::size_t>(lp.rows());
  CtcPrefixState h;
  h.rn.assign(t_len, kNegInf);
  h.rb.assign(t_len, kNegInf);
  h.rn[0] = last < 0 ? lp(0, c) : kNegInf;
  double psi = h.rn[0];
  for (std::size_t t = 1; t < t_len; ++t) {
    auto ti = static_cast<Eigen::Index>(t);
    double phi = c == last ? g.rb[t - 1] : log_add(g.rb[t - 1], g.rn[t - 1]);
    h.rn[t] = log_add(h.rn[t - 1], phi) + lp(ti, c);
    h.rb[t] = log_add(h.rb[t - 1], h.rn[t - 1]) + lp(ti, Vocabulary::kBlank);
    psi = log_add(psi, phi + lp(ti, c));
  }
  h.psi = psi;
  return h;
}

double ctc_final(const CtcPrefixState& s) {
  if (s.rn.empty()) return 0.0;
  return log_add(s.rn.back(), s.rb.back());
}

struct JointHyp {
  std::vector<int> labels;
  double att = 0.0, ctc = 0.0, lm = 0.0;
  CtcPrefixState state;
  std::vector<int> lm_hist;
};

}  // namespace

double ctc_prefix_log_prob(const Mat& lp, const std::vector<int>& prefix, int blank) {
  if (blank != Vocabulary::kBlank) throw ValidationError("prefix scoring assumes blank id 0");
  CtcPrefixState s = ctc_initial(lp);
  int last = -1;
  for (int c : prefix) {
    s = ctc_extend(lp, s, last, c);
    last = c;
  }
  return s.psi;
}

std::vector<Hypothesis> joint_attention_decode(const AsrModel& model, const Mat& features, const DecodeConfig& cfg,
                                               const NgramLm* char_lm) {
  cfg.validate();
  const Vocabulary& vocab = model.vocab();
  const int v = vocab.size();
  const double wc = cfg.ctc_weight_decode, wl = char_lm ? cfg.lm_weight : 0.0;
  const int beam = cfg.effective_beam();
  Mat enc = forward_encoder(model, features);
  Mat lp = ctc_log_posteriors(model, enc);
  const int max_len = cfg.max_length > 0 ? cfg.max_length : static_cast<int>(enc.rows());

  std::vector<int> lm_id(static_cast<std::size_t>(v), -1);
  int lm_eos = -1;
  if (char_lm) {
    for (int i = Vocabulary::kNumSpecial; i < v; ++i) {
      const std::string& s = vocab.symbol(i);
      lm_id[static_cast<std::size_t>(i)] = char_lm->find(s == " " ? kSpaceToken : s);
    }
    lm_eos = char_lm->eos();
  }
  auto total_of = [&](double ctc, double att, double lm) {
    double t = (1.0 - wc) * att + wl * lm;
    if (wc > 0) t += wc * ctc;
    return t;
  };

  JointHyp root;
  if (wc > 0) root.state = ctc_initial(lp);
  if (char_lm && char_lm->sentence_boundaries()) root.lm_hist.push_back(char_lm->bos());
  std::vector<JointHyp> live{root};
  std::vector<Hypothesis> ended;

  for (int step = 0; step <= max_len && !live.empty(); ++step) {
    struct Cand {
      double score;
      std::size_t hyp;
      int token;
      double att, ctc, lm;
    };
    std::vector<Cand> cands;
    for (std::size_t hi = 0; hi < live.size(); ++hi) {
      const JointHyp& h = live[hi];
      std::vector<int> in{Vocabulary::kSosEos};
      in.insert(in.end(), h.labels.begin(), h.labels.end());
      Mat dl = decoder_log_probs(model, enc, in);
      auto last_row = dl.row(dl.rows() - 1);
      const int last = h.labels.empty() ? -1 : h.labels.back();
      for (int c = Vocabulary::kSosEos; c < v; ++c) {
        if (c == Vocabulary::kUnk) continue;
        bool eos = c == Vocabulary::kSosEos;
        if (!eos && step == max_len) continue;
        double att = h.att + last_row(c);
        double ctc = 0.0;
        if (wc > 0) ctc = eos ? ctc_final(h.state) : ctc_extend(lp, h.state, last, c).psi;
        double lm = h.lm;
        if (char_lm) lm += kLn10 * char_lm->cond_log10(h.lm_hist, eos ? lm_eos : lm_id[static_cast<std::size_t>(c)]);
        double s = total_of(ctc, att, lm);
        if (!std::isfinite(s)) continue;
        cands.push_back({s, hi, c, att, ctc, lm});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.token < b.token;
    });
    if (static_cast<int>(cands.size()) > beam) cands.resize(static_cast<std::size_t>(beam));
    std::vector<JointHyp> next;
    for (const auto& c : cands) {
      const JointHyp& h = live[c.hyp];
      if (c.token == Vocabulary::kSosEos) {
        Hypothesis out;
        out.labels = h.labels;
        out.score_attention = c.att;
        out.score_acoustic = wc > 0 ? c.ctc : 0.0;
        out.score_lm = c.lm;
        out.score_total = c.score;
        finish(out, vocab);
        ended.push_back(std::move(out));
        continue;
      }
      JointHyp n;
      n.labels = h.labels;
      n.labels.push_back(c.token);
      n.att = c.att;
      n.ctc = c.ctc;
      n.lm = c.lm;
      if (wc > 0) n.state = ctc_extend(lp, h.state, h.labels.empty() ? -1 : h.labels.back(), c.token);
      n.lm_hist = h.lm_hist;
      if (char_lm) n.lm_hist.push_back(lm_id[static_cast<std::size_t>(c.token)]);
      next.push_back(std::move(n));
    }
    live = std::move(next);
  }
  if (ended.empty()) {
    Hypothesis h;
    h.search_failed = true;
    h.score_total = kNegInf;
    return {h};
  }
  std::stable_sort(ended.begin(), ended.end(), [](const Hypothesis& a, const Hypothesis& b) {
    double na = a.score_total / static_cast<double>(a.labels.size() + 1);
    double nb = b.score_total / static_cast<double>(b.labels.size() + 1);
    if (na != nb) return na > nb;
    return a.labels < b.labels;
  });
  return ended;
}

Hypothesis decode_features(const AsrModel& model, const Mat& features, const DecodeConfig& cfg,
                           const DecodeResources& res) {
  switch (cfg.mode) {
    case DecodeMode::ctc_greedy:
      return ctc_greedy(ctc_log_posteriors(model, forward_encoder(model, features)), model.vocab());
    case DecodeMode::ctc_beam_lm: {
      if (!res.lexicon) throw ValidationError("ctc_beam_lm needs a lexicon");
      Mat lp = ctc_log_posteriors(model, forward_encoder(model, features));
      return ctc_beam_lm(lp, model.vocab(), *res.lexicon, res.word_lm, cfg).front();
    }
    case DecodeMode::joint_attention:
      return joint_attention_decode(model, features, cfg, res.char_lm).front();
  }
  throw ValidationError("bad decode mode");
}

TranscribeResult transcribe_manifest(const AsrModel& model, const Manifest& manifest, const DecodeConfig& cfg,
                                     const DecodeResources& res) {
  cfg.validate();
  TranscribeResult r;
  for (const auto& u : manifest.utterances) {
    Audio audio;
    try {
      audio = read_wav(u.audio_path);
    } catch (const std::exception& e) {
      r.errors.push_back({u.utt_id, "audio", e.what()});
      continue;
    }
    try {
      FeatureMatrix f = model.featurize(audio);
      if (f.frames.rows() < kMinInputFrames) {
        r.errors.push_back({u.utt_id, "too_short", "utterance shorter than the encoder receptive field"});
        continue;
      }
      Hypothesis h = decode_features(model, f.frames, cfg, res);
      if (h.search_failed) {
        r.errors.push_back({u.utt_id, "search", "beam kept no complete hypothesis"});
        continue;
      }
      r.rows.push_back({u.utt_id, h.text, h.confidence, h.score_total});
    } catch (const std::exception& e) {
      r.errors.push_back({u.utt_id, "decode", e.what()});
    }
  }
  return r;
}

namespace {
std::string clean_field(std::string s) {
  for (auto& ch : s)
    if (ch == '\t' || ch == '\n' || ch == '\r') ch = ' ';
  return s;
}
}  // namespace

std::string hypotheses_tsv(const std::vector<HypothesisRow>& rows) {
  std::string out = "utt_id\ttext\tconfidence\tscore_total\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\n", r.confidence, r.score_total);
    out += clean_field(r.utt_id) + "\t" + clean_field(r.text) + buf;
  }
  return out;
}

std::string errors_tsv(const std::vector<DecodeError>& errors) {
  std::string out = "utt_id\terror_class\tmessage\n";
  for (const auto& e : errors) out += clean_field(e.utt_id) + "\t" + clean_field(e.error_class) + "\t" + clean_field(e.message) + "\n";
  return out;
}

std::vector<HypothesisRow> parse_hypotheses_tsv(const std::string& text) {
  std::vector<HypothesisRow> rows;
  std::istringstream is(text);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (n == 1 && line.rfind("utt_id\t", 0) == 0) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
      auto tab = line.find('\t', start);
      f.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    auto bad = [&](const std::string& why) {
      throw ValidationError("hypothesis TSV line " + std::to_string(n) + ": " + why);
    };
    if (f.size() != 4) bad("expected 4 tab-separated fields, found " + std::to_string(f.size()));
    if (f[0].empty()) bad("empty utt_id");
    HypothesisRow r;
    r.utt_id = f[0];
    r.text = f[1];
    try {
      std::size_t used = 0;
      r.confidence = std::stod(f[2], &used);
      if (used != f[2].size()) bad("bad confidence");
      r.score_total = std::stod(f[3], &used);
      if (used != f[3].size()) bad("bad score");
    } catch (const std::invalid_argument&) {
      bad("non-numeric confidence or score");
    } catch (const std::out_of_range&) {
      bad("number out of range");
    }
    if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) bad("confidence outside [0, 1]");
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace lowsup
