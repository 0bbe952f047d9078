#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtn/mtn.hpp"
#include "mtn/rng.hpp"

namespace mtn {

// One line of the raw query log: who searched, what they typed, and when
// (UTC seconds).
struct LogRecord {
  std::string anon_id;
  std::string query;
  std::int64_t timestamp = 0;
};

struct ParseStats {
  std::size_t lines = 0;      // candidate lines, header and blanks excluded
  std::size_t malformed = 0;  // skipped lines
  std::size_t records = 0;
};

// Reads tab-separated `anon_id \t query \t timestamp` lines with ISO-8601
// timestamps ('T' or space between date and time). Fields are trimmed. An
// optional leading `AnonID  Query   QueryTime` header is skipped silently.
// Malformed lines are counted and skipped; when more than half of the
// candidate lines are malformed the input is rejected as a FormatError.
std::vector<LogRecord> parse_log(std::istream& in, ParseStats* stats = nullptr);
// Same, from a file path. Unreadable file throws IoError.
std::vector<LogRecord> parse_log_file(const std::string& path,
                                      ParseStats* stats = nullptr);

// Orders records by user key, then timestamp, keeping file order for ties.
void sort_records(std::vector<LogRecord>& records);

// Queries of one user with no 30-minute silence inside, still raw text.
struct RawSession {
  std::string user;
  std::vector<std::string> queries;
};

// Splits each user's time-ordered record run at every gap of at least
// `gap_seconds`. Sessions never span users. Records must arrive grouped by
// user and time-ordered within the group, otherwise OrderingError.
std::vector<RawSession> sessionize(const std::vector<LogRecord>& records,
                                   std::int64_t gap_seconds = 30 * 60);

// A cleaned session: lowercased, whitespace-tokenized queries.
struct Session {
  std::string user;
  std::vector<std::vector<std::string>> queries;
};

// Lowercases and tokenizes, drops queries longer than `max_tokens` (never
// truncates), collapses consecutive duplicate queries, then keeps sessions
// with `min_len` to `max_len` queries.
std::vector<Session> filter_and_normalize(const std::vector<RawSession>& raw,
                                          std::size_t max_tokens = 10,
                                          std::size_t min_len = 3,
                                          std::size_t max_len = 5);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kReserved = 4;

  Vocabulary() = default;

  // Total id count, reserved ids included.
  std::size_t size() const { return kReserved + tokens_.size(); }
  // Unknown tokens map to kUnk.
  int id_of(const std::string& token) const;
  // Reserved ids print as <pad>, <unk>, <bos>, <eos>.
  const std::string& token_of(int id) const;
  std::size_t count_of(const std::string& token) const;
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  // One `token<TAB>count` line per kept token, in id order; reserved ids are
  // implicit.
  std::string to_text() const;
  static Vocabulary from_text(const std::string& text);
  void save_file(const std::string& path) const;
  static Vocabulary load_file(const std::string& path);

 private:
  friend Vocabulary build_vocab(const std::vector<Session>&, int);
  std::vector<std::string> tokens_;  // index = id - kReserved
  std::vector<std::size_t> counts_;
  std::unordered_map<std::string, int> ids_;
};

// Counts tokens over the training sessions only; keeps tokens occurring at
// least `min_count` times, ids by descending count with lexicographic
// tie-break. Empty corpus throws VocabError, min_count < 1 ConfigError.
Vocabulary build_vocab(const std::vector<Session>& train_sessions,
                       int min_count = 8);

// One supervised example: the first j queries predict query j+1. Token ids,
// unpadded; the target carries no <bos>/<eos> yet.
struct PairExample {
  std::vector<std::vector<int>> source;
  std::vector<int> target;
};

// A session of k queries yields the k-1 growing-prefix examples.
std::vector<PairExample> unroll_pairs(const Session& session,
                                      const Vocabulary& vocab);
std::vector<PairExample> unroll_pairs(const std::vector<Session>& sessions,
                                      const Vocabulary& vocab);

// Examples that share a source-prefix length, model-ready: source queries
// padded to n_max with validity masks, targets wrapped in <bos>/<eos>.
struct SessionBatch {
  std::size_t prefix_len = 0;
  std::vector<std::vector<EncodedQuery>> sources;
  std::vector<std::vector<int>> targets;
};

// Shuffles the examples with `rng`, groups them by prefix length, and cuts
// capacity-sized batches; the final batch order is shuffled too, so the whole
// layout is a pure function of the seed. A query or target longer than n_max
// throws FormatError.
std::vector<SessionBatch> make_batches(const std::vector<PairExample>& examples,
                                       std::size_t batch_capacity,
                                       std::size_t n_max, Rng& rng);

struct SplitRatios {
  double train = 0.95;
  double valid = 0.025;
  double test = 0.025;
};

struct SplitSessions {
  std::vector<Session> train;
  std::vector<Session> valid;
  std::vector<Session> test;
};

// Random partition by session. Valid and test sizes round down, the rest is
// training data, so small corpora degrade toward train-only.
SplitSessions split_sessions(const std::vector<Session>& sessions,
                             const SplitRatios& ratios, Rng& rng);

// Prepared-dataset text: one session per line, queries joined by tabs,
// tokens by single spaces.
std::string sessions_to_text(const std::vector<Session>& sessions);
std::vector<Session> sessions_from_text(const std::string& text);
void save_sessions(const std::string& path, const std::vector<Session>& sessions);
std::vector<Session> load_sessions(const std::string& path);

}  // namespace mtn
