#include "mtn/sessions_data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <ctime>
#include <fstream>
#include <istream>
#include <iterator>
#include <map>
#include <sstream>
#include <unordered_set>

#include "mtn/errors.hpp"

namespace mtn {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_tabs_trimmed(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(trim(line.substr(start)));
      break;
    }
    fields.push_back(trim(line.substr(start, tab - start)));
    start = tab + 1;
  }
  return fields;
}

// Accepts `YYYY-MM-DDTHH:MM:SS` and the space-separated variant, UTC.
bool parse_timestamp(const std::string& text, std::int64_t& out) {
  for (const char* pattern : {"%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"}) {
    std::tm tm = {};
    const char* end = strptime(text.c_str(), pattern, &tm);
    if (end != nullptr && *end == '\0') {
      out = static_cast<std::int64_t>(timegm(&tm));
      return true;
    }
  }
  return false;
}

std::string lowercase(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::istringstream in(text);
  std::string token;
  while (in >> token) tokens.push_back(token);
  return tokens;
}

std::string read_file(const std::string& path, const char* who) {
  std::ifstream in(path, std::ios::binary);
  if (!in.is_open()) {
    throw IoError(std::string(who) + ": cannot open " + path);
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError(std::string(who) + ": read failure on " + path);
  return buf.str();
}

void write_file(const std::string& path, const std::string& text,
                const char* who) {
  std::ofstream out(path, std::ios::binary);
  if (!out.is_open()) {
    throw IoError(std::string(who) + ": cannot open " + path + " for writing");
  }
  out << text;
  out.flush();
  if (!out.good()) throw IoError(std::string(who) + ": write failure on " + path);
}

const std::string kReservedNames[Vocabulary::kReserved] = {"<pad>", "<unk>",
                                                           "<bos>", "<eos>"};

}  // namespace

std::vector<LogRecord> parse_log(std::istream& in, ParseStats* stats) {
  ParseStats local;
  std::vector<LogRecord> records;
  std::string line;
  bool may_be_header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    std::vector<std::string> fields = split_tabs_trimmed(line);
    if (may_be_header) {
      may_be_header = false;
      if (fields.size() >= 3 && fields[0] == "AnonID" && fields[1] == "Query" &&
          fields[2] == "QueryTime") {
        continue;
      }
    }
    local.lines += 1;
    LogRecord record;
    if (fields.size() == 3 && !fields[0].empty() && !fields[1].empty() &&
        parse_timestamp(fields[2], record.timestamp)) {
      record.anon_id = fields[0];
      record.query = fields[1];
      records.push_back(std::move(record));
      local.records += 1;
    } else {
      local.malformed += 1;
    }
  }
  if (in.bad()) throw IoError("parse_log: read failure");
  if (local.lines > 0 && local.malformed * 2 > local.lines) {
    throw FormatError("parse_log: " + std::to_string(local.malformed) + " of " +
                      std::to_string(local.lines) +
                      " lines malformed, input does not look like a query log");
  }
  if (stats) *stats = local;
  return records;
}

std::vector<LogRecord> parse_log_file(const std::string& path,
                                      ParseStats* stats) {
  std::ifstream in(path, std::ios::binary);
  if (!in.is_open()) throw IoError("parse_log: cannot open " + path);
  return parse_log(in, stats);
}

void sort_records(std::vector<LogRecord>& records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const LogRecord& a, const LogRecord& b) {
                     if (a.anon_id != b.anon_id) return a.anon_id < b.anon_id;
                     return a.timestamp < b.timestamp;
                   });
}

std::vector<RawSession> sessionize(const std::vector<LogRecord>& records,
                                   std::int64_t gap_seconds) {
  if (gap_seconds <= 0) {
    throw ConfigError("sessionize: gap must be positive, got " +
                      std::to_string(gap_seconds));
  }
  std::vector<RawSession> sessions;
  std::unordered_set<std::string> closed_users;
  RawSession current;
  const LogRecord* prev = nullptr;
  auto flush = [&] {
    if (!current.queries.empty()) sessions.push_back(std::move(current));
    current = RawSession{};
  };
  for (const LogRecord& r : records) {
    if (prev == nullptr || prev->anon_id != r.anon_id) {
      if (prev != nullptr) closed_users.insert(prev->anon_id);
      if (closed_users.count(r.anon_id) > 0) {
        throw OrderingError("sessionize: records for user " + r.anon_id +
                            " are not contiguous");
      }
      flush();
      current.user = r.anon_id;
    } else if (r.timestamp < prev->timestamp) {
      throw OrderingError("sessionize: user " + r.anon_id +
                          " records are not time-ordered");
    } else if (r.timestamp - prev->timestamp >= gap_seconds) {
      flush();
      current.user = r.anon_id;
    }
    current.queries.push_back(r.query);
    prev = &r;
  }
  flush();
  return sessions;
}

std::vector<Session> filter_and_normalize(const std::vector<RawSession>& raw,
                                          std::size_t max_tokens,
                                          std::size_t min_len,
                                          std::size_t max_len) {
  std::vector<Session> kept;
  for (const RawSession& rs : raw) {
    Session session;
    session.user = rs.user;
    for (const std::string& q : rs.queries) {
      std::vector<std::string> tokens = tokenize(lowercase(q));
      if (tokens.empty() || tokens.size() > max_tokens) continue;
      if (!session.queries.empty() && session.queries.back() == tokens) continue;
      session.queries.push_back(std::move(tokens));
    }
    if (session.queries.size() >= min_len && session.queries.size() <= max_len) {
      kept.push_back(std::move(session));
    }
  }
  return kept;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= size()) {
    throw VocabError("token_of: id " + std::to_string(id) +
                     " outside vocabulary of size " + std::to_string(size()));
  }
  if (id < kReserved) return kReservedNames[id];
  return tokens_[static_cast<std::size_t>(id) - kReserved];
}

std::size_t Vocabulary::count_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? 0
                          : counts_[static_cast<std::size_t>(it->second) -
                                    kReserved];
}

std::vector<int> Vocabulary::encode(
    const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const std::string& t : tokens) ids.push_back(id_of(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (int id : ids) tokens.push_back(token_of(id));
  return tokens;
}

std::string Vocabulary::to_text() const {
  std::string out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    out += tokens_[i];
    out += '\t';
    out += std::to_string(counts_[i]);
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::from_text(const std::string& text) {
  Vocabulary vocab;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw FormatError("vocabulary: line " + std::to_string(line_no) +
                        " is not token<TAB>count");
    }
    std::string token = line.substr(0, tab);
    std::size_t count = 0;
    try {
      count = std::stoull(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw FormatError("vocabulary: line " + std::to_string(line_no) +
                        " has a non-numeric count");
    }
    if (vocab.ids_.count(token) > 0) {
      throw FormatError("vocabulary: duplicate token " + token + " on line " +
                        std::to_string(line_no));
    }
    vocab.ids_[token] = static_cast<int>(kReserved + vocab.tokens_.size());
    vocab.tokens_.push_back(std::move(token));
    vocab.counts_.push_back(count);
  }
  return vocab;
}

void Vocabulary::save_file(const std::string& path) const {
  write_file(path, to_text(), "vocabulary");
}

Vocabulary Vocabulary::load_file(const std::string& path) {
  return from_text(read_file(path, "vocabulary"));
}

Vocabulary build_vocab(const std::vector<Session>& train_sessions,
                       int min_count) {
  if (min_count < 1) {
    throw ConfigError("build_vocab: min_count must be at least 1, got " +
                      std::to_string(min_count));
  }
  std::unordered_map<std::string, std::size_t> counts;
  std::size_t total_tokens = 0;
  for (const Session& s : train_sessions) {
    for (const auto& query : s.queries) {
      for (const std::string& token : query) {
        counts[token] += 1;
        total_tokens += 1;
      }
    }
  }
  if (total_tokens == 0) {
    throw VocabError("build_vocab: the training corpus has no tokens");
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [token, count] : counts) {
    if (count >= static_cast<std::size_t>(min_count)) kept.emplace_back(token, count);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary vocab;
  for (auto& [token, count] : kept) {
    vocab.ids_[token] = static_cast<int>(Vocabulary::kReserved +
                                         vocab.tokens_.size());
    vocab.tokens_.push_back(std::move(token));
    vocab.counts_.push_back(count);
  }
  return vocab;
}

std::vector<PairExample> unroll_pairs(const Session& session,
                                      const Vocabulary& vocab) {
  const std::size_t k = session.queries.size();
  if (k < 2) {
    throw ShapeError("unroll_pairs: session needs at least 2 queries, got " +
                     std::to_string(k));
  }
  std::vector<std::vector<int>> encoded;
  encoded.reserve(k);
  for (const auto& query : session.queries) encoded.push_back(vocab.encode(query));
  std::vector<PairExample> examples;
  examples.reserve(k - 1);
  for (std::size_t j = 1; j < k; ++j) {
    PairExample ex;
    ex.source.assign(encoded.begin(), encoded.begin() + static_cast<long>(j));
    ex.target = encoded[j];
    examples.push_back(std::move(ex));
  }
  return examples;
}

std::vector<PairExample> unroll_pairs(const std::vector<Session>& sessions,
                                      const Vocabulary& vocab) {
  std::vector<PairExample> all;
  for (const Session& s : sessions) {
    std::vector<PairExample> part = unroll_pairs(s, vocab);
    all.insert(all.end(), std::make_move_iterator(part.begin()),
               std::make_move_iterator(part.end()));
  }
  return all;
}

std::vector<SessionBatch> make_batches(const std::vector<PairExample>& examples,
                                       std::size_t batch_capacity,
                                       std::size_t n_max, Rng& rng) {
  if (batch_capacity < 1) {
    throw ConfigError("make_batches: batch capacity must be at least 1");
  }
  if (n_max < 1) {
    throw ConfigError("make_batches: n_max must be at least 1");
  }
  for (const PairExample& ex : examples) {
    for (const auto& q : ex.source) {
      if (q.empty() || q.size() > n_max) {
        throw FormatError("make_batches: source query of " +
                          std::to_string(q.size()) + " tokens outside 1.." +
                          std::to_string(n_max));
      }
    }
    if (ex.source.empty() || ex.target.empty() || ex.target.size() > n_max) {
      throw FormatError("make_batches: target of " +
                        std::to_string(ex.target.size()) +
                        " tokens outside 1.." + std::to_string(n_max));
    }
  }

  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t idx : order) by_len[examples[idx].source.size()].push_back(idx);

  auto encode_query = [n_max](const std::vector<int>& ids) {
    EncodedQuery q;
    q.ids = ids;
    q.ids.resize(n_max, Vocabulary::kPad);
    q.valid.assign(ids.size(), true);
    q.valid.resize(n_max, false);
    return q;
  };

  std::vector<SessionBatch> batches;
  for (const auto& [len, members] : by_len) {
    for (std::size_t start = 0; start < members.size();
         start += batch_capacity) {
      SessionBatch batch;
      batch.prefix_len = len;
      const std::size_t stop =
          std::min(members.size(), start + batch_capacity);
      for (std::size_t i = start; i < stop; ++i) {
        const PairExample& ex = examples[members[i]];
        std::vector<EncodedQuery> source;
        source.reserve(ex.source.size());
        for (const auto& q : ex.source) source.push_back(encode_query(q));
        batch.sources.push_back(std::move(source));
        std::vector<int> target;
        target.reserve(ex.target.size() + 2);
        target.push_back(Vocabulary::kBos);
        target.insert(target.end(), ex.target.begin(), ex.target.end());
        target.push_back(Vocabulary::kEos);
        batch.targets.push_back(std::move(target));
      }
      batches.push_back(std::move(batch));
    }
  }
  rng.shuffle(batches);
  return batches;
}

SplitSessions split_sessions(const std::vector<Session>& sessions,
                             const SplitRatios& ratios, Rng& rng) {
  if (ratios.train <= 0.0 || ratios.valid < 0.0 || ratios.test < 0.0 ||
      ratios.train + ratios.valid + ratios.test > 1.0 + 1e-9) {
    throw ConfigError("split_sessions: ratios must be nonnegative with a "
                      "positive train share summing to at most 1");
  }
  std::vector<std::size_t> order(sessions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const std::size_t n = sessions.size();
  const std::size_t n_valid =
      static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.valid));
  const std::size_t n_test =
      static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.test));

  std::vector<std::size_t> valid_idx(order.begin(),
                                     order.begin() + static_cast<long>(n_valid));
  std::vector<std::size_t> test_idx(
      order.begin() + static_cast<long>(n_valid),
      order.begin() + static_cast<long>(n_valid + n_test));
  std::vector<std::size_t> train_idx(
      order.begin() + static_cast<long>(n_valid + n_test), order.end());
  std::sort(valid_idx.begin(), valid_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  SplitSessions split;
  for (std::size_t i : train_idx) split.train.push_back(sessions[i]);
  for (std::size_t i : valid_idx) split.valid.push_back(sessions[i]);
  for (std::size_t i : test_idx) split.test.push_back(sessions[i]);
  return split;
}

std::string sessions_to_text(const std::vector<Session>& sessions) {
  std::string out;
  for (const Session& s : sessions) {
    for (std::size_t q = 0; q < s.queries.size(); ++q) {
      if (q > 0) out += '\t';
      const auto& tokens = s.queries[q];
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (t > 0) out += ' ';
        out += tokens[t];
      }
    }
    out += '\n';
  }
  return out;
}

std::vector<Session> sessions_from_text(const std::string& text) {
  std::vector<Session> sessions;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    Session session;
    for (const std::string& query : split_tabs_trimmed(line)) {
      std::vector<std::string> tokens = tokenize(query);
      if (tokens.empty()) {
        throw FormatError("prepared data: empty query on line " +
                          std::to_string(line_no));
      }
      session.queries.push_back(std::move(tokens));
    }
    sessions.push_back(std::move(session));
  }
  return sessions;
}

void save_sessions(const std::string& path,
                   const std::vector<Session>& sessions) {
  write_file(path, sessions_to_text(sessions), "prepared data");
}

std::vector<Session> load_sessions(const std::string& path) {
  return sessions_from_text(read_file(path, "prepared data"));
}

}  // namespace mtn
