#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mtn/errors.hpp"
#include "mtn/rng.hpp"
#include "mtn/sessions_data.hpp"

using namespace mtn;

namespace {

RawSession raw_session(std::vector<std::string> queries) {
  RawSession rs;
  rs.user = "u";
  rs.queries = std::move(queries);
  return rs;
}

Session session_of(std::vector<std::vector<std::string>> queries) {
  Session s;
  s.user = "u";
  s.queries = std::move(queries);
  return s;
}

std::size_t total_examples(const std::vector<SessionBatch>& batches) {
  std::size_t n = 0;
  for (const SessionBatch& b : batches) n += b.targets.size();
  return n;
}

}  // namespace

TEST_SUITE("sessions") {

TEST_CASE("log lines parse into trimmed records with UTC timestamps") {
  std::istringstream in(
      "7 \t car parts \t 2006-03-01T08:00:00\n"
      "7\tcar parts\t2006-03-01 08:00:00\n");
  ParseStats stats;
  std::vector<LogRecord> records = parse_log(in, &stats);
  REQUIRE(records.size() == 2);
  CHECK(records[0].anon_id == "7");
  CHECK(records[0].query == "car parts");
  CHECK(records[0].timestamp == 1141200000);
  CHECK(records[1].timestamp == records[0].timestamp);
  CHECK(stats.lines == 2);
  CHECK(stats.malformed == 0);
}

TEST_CASE("malformed lines are counted and skipped, headers silently") {
  std::istringstream in(
      "AnonID\tQuery\tQueryTime\n"
      "7\t\t2006-03-01T08:00:00\n"
      "8\tlaptops\tnot a time\n"
      "9\tused cars\t2006-03-01T09:00:00\n"
      "10\tonly two fields\n"
      "11\tflowers\t2006-03-01T10:00:00\n"
      "12\tgarden hose\t2006-03-01T10:05:00\n"
      "13\tseeds\t2006-03-01T10:06:00\n");
  ParseStats stats;
  std::vector<LogRecord> records = parse_log(in, &stats);
  REQUIRE(records.size() == 4);
  CHECK(records[0].anon_id == "9");
  CHECK(records[1].anon_id == "11");
  CHECK(stats.lines == 7);
  CHECK(stats.malformed == 3);
}

TEST_CASE("mostly-malformed input is rejected as a format error") {
  std::istringstream in(
      "garbage line one\n"
      "garbage line two\n"
      "7\tcar parts\t2006-03-01T08:00:00\n");
  CHECK_THROWS_AS(parse_log(in), FormatError);
  CHECK_THROWS_AS(parse_log_file("/nonexistent/query.log"), IoError);
}

TEST_CASE("sessionize splits at thirty-minute silences, inclusive") {
  auto rec = [](const char* user, const char* q, std::int64_t t) {
    return LogRecord{user, q, t};
  };
  const std::int64_t base = 1141200000;

  SUBCASE("29-minute gap stays one session") {
    std::vector<LogRecord> records = {rec("7", "a", base),
                                      rec("7", "b", base + 29 * 60)};
    auto sessions = sessionize(records);
    REQUIRE(sessions.size() == 1);
    CHECK(sessions[0].queries == std::vector<std::string>{"a", "b"});
  }
  SUBCASE("31-minute gap splits") {
    std::vector<LogRecord> records = {rec("7", "a", base),
                                      rec("7", "b", base + 31 * 60)};
    CHECK(sessionize(records).size() == 2);
  }
  SUBCASE("exactly 30 minutes splits") {
    std::vector<LogRecord> records = {rec("7", "a", base),
                                      rec("7", "b", base + 30 * 60)};
    CHECK(sessionize(records).size() == 2);
  }
  SUBCASE("sessions never span users") {
    std::vector<LogRecord> records = {rec("7", "a", base),
                                      rec("8", "b", base + 10)};
    auto sessions = sessionize(records);
    REQUIRE(sessions.size() == 2);
    CHECK(sessions[0].user == "7");
    CHECK(sessions[1].user == "8");
  }
  SUBCASE("time going backwards within a user is an ordering error") {
    std::vector<LogRecord> records = {rec("7", "a", base),
                                      rec("7", "b", base - 1)};
    CHECK_THROWS_AS(sessionize(records), OrderingError);
  }
  SUBCASE("a user split across two runs is an ordering error") {
    std::vector<LogRecord> records = {rec("7", "a", base),
                                      rec("8", "b", base),
                                      rec("7", "c", base + 10)};
    CHECK_THROWS_AS(sessionize(records), OrderingError);
  }
  SUBCASE("sort_records groups by user then time") {
    std::vector<LogRecord> records = {rec("8", "b", base + 10),
                                      rec("7", "d", base + 99),
                                      rec("7", "a", base)};
    sort_records(records);
    CHECK(records[0].query == "a");
    CHECK(records[1].query == "d");
    CHECK(records[2].query == "b");
    CHECK_NOTHROW(sessionize(records));
  }
}

TEST_CASE("filtering lowercases, deduplicates, and keeps 3..5-query sessions") {
  SUBCASE("normalization lowercases and splits on whitespace") {
    auto sessions = filter_and_normalize(
        {raw_session({"Car  Parts", "used CARS", "car dealers"})});
    REQUIRE(sessions.size() == 1);
    CHECK(sessions[0].queries[0] == std::vector<std::string>{"car", "parts"});
    CHECK(sessions[0].queries[1] == std::vector<std::string>{"used", "cars"});
  }
  SUBCASE("dedup can shrink a session below the minimum") {
    auto sessions = filter_and_normalize({raw_session({"a b", "a b", "c"})});
    CHECK(sessions.empty());
  }
  SUBCASE("over-long queries are dropped, not truncated") {
    auto sessions = filter_and_normalize(
        {raw_session({"one two three four five six seven eight nine ten eleven",
                      "a", "b", "c"})});
    REQUIRE(sessions.size() == 1);
    CHECK(sessions[0].queries.size() == 3);
    CHECK(sessions[0].queries[0] == std::vector<std::string>{"a"});
  }
  SUBCASE("length bounds are inclusive") {
    CHECK(filter_and_normalize({raw_session({"a", "b"})}).empty());
    CHECK(filter_and_normalize({raw_session({"a", "b", "c"})}).size() == 1);
    CHECK(filter_and_normalize({raw_session({"a", "b", "c", "d", "e"})}).size() == 1);
    CHECK(filter_and_normalize({raw_session({"a", "b", "c", "d", "e", "f"})}).empty());
  }
}

TEST_CASE("vocabulary keeps tokens at the count threshold with lexicographic ties") {
  // "car" and "bus" appear 8 times each, "van" 7 times.
  Session s;
  s.user = "u";
  for (int i = 0; i < 8; ++i) s.queries.push_back({"car"});
  for (int i = 0; i < 8; ++i) s.queries.push_back({"bus"});
  for (int i = 0; i < 7; ++i) s.queries.push_back({"van"});
  std::vector<Session> corpus = {s};

  Vocabulary vocab = build_vocab(corpus, 8);
  CHECK(vocab.size() == 6);
  CHECK(vocab.id_of("bus") == 4);
  CHECK(vocab.id_of("car") == 5);
  CHECK(vocab.id_of("van") == Vocabulary::kUnk);
  CHECK(vocab.count_of("bus") == 8);
  CHECK(vocab.token_of(0) == "<pad>");
  CHECK(vocab.token_of(3) == "<eos>");
  CHECK(vocab.token_of(4) == "bus");
  CHECK_THROWS_AS(vocab.token_of(6), VocabError);
  CHECK_THROWS_AS(build_vocab({}, 8), VocabError);
  CHECK_THROWS_AS(build_vocab(corpus, 0), ConfigError);
}

TEST_CASE("vocabulary text round-trips with identical id assignment") {
  std::vector<Session> corpus = {
      session_of({{"deep", "nets"}, {"deep"}, {"query", "nets", "deep"}})};
  Vocabulary vocab = build_vocab(corpus, 2);
  std::string text = vocab.to_text();
  Vocabulary back = Vocabulary::from_text(text);
  CHECK(back.size() == vocab.size());
  for (int id = 0; id < static_cast<int>(vocab.size()); ++id) {
    CHECK(back.token_of(id) == vocab.token_of(id));
  }
  CHECK(back.to_text() == text);
  CHECK(back.id_of("deep") == vocab.id_of("deep"));
  CHECK_THROWS_AS(Vocabulary::from_text("justatoken\n"), FormatError);
  CHECK_THROWS_AS(Vocabulary::from_text("tok\tnotanumber\n"), FormatError);
}

TEST_CASE("a session of k queries unrolls into k-1 growing prefixes") {
  std::vector<Session> corpus = {
      session_of({{"a"}, {"b"}, {"c"}, {"d"}, {"e"}})};
  Vocabulary vocab = build_vocab(corpus, 1);
  Session s = corpus[0];

  std::vector<PairExample> examples = unroll_pairs(s, vocab);
  REQUIRE(examples.size() == 4);
  CHECK(examples[0].source.size() == 1);
  CHECK(examples[3].source.size() == 4);
  CHECK(examples[0].target == vocab.encode({"b"}));
  CHECK(examples[2].source[2] == vocab.encode({"c"}));

  Session three = session_of({{"a"}, {"b"}, {"c"}});
  CHECK(unroll_pairs(three, vocab).size() == 2);
  Session one = session_of({{"a"}});
  CHECK_THROWS_AS(unroll_pairs(one, vocab), ShapeError);

  Session with_oov = session_of({{"a"}, {"zebra"}, {"c"}});
  auto oov_examples = unroll_pairs(with_oov, vocab);
  CHECK(oov_examples[0].target == std::vector<int>{Vocabulary::kUnk});
}

TEST_CASE("batches group by prefix length, pad queries, and wrap targets") {
  std::vector<Session> corpus = {
      session_of({{"a", "b"}, {"c"}, {"a", "b", "c"}, {"b"}})};
  Vocabulary vocab = build_vocab(corpus, 1);
  std::vector<PairExample> examples = unroll_pairs(corpus, vocab);
  REQUIRE(examples.size() == 3);

  Rng rng(4);
  std::vector<SessionBatch> batches = make_batches(examples, 8, 4, rng);
  REQUIRE(batches.size() == 3);
  CHECK(total_examples(batches) == examples.size());

  for (const SessionBatch& batch : batches) {
    REQUIRE(batch.sources.size() == 1);
    CHECK(batch.sources[0].size() == batch.prefix_len);
    for (const EncodedQuery& q : batch.sources[0]) {
      REQUIRE(q.ids.size() == 4);
      REQUIRE(q.valid.size() == 4);
      std::size_t real = 0;
      for (std::size_t i = 0; i < 4; ++i) {
        if (q.valid[i]) {
          ++real;
          CHECK(q.ids[i] != Vocabulary::kPad);
        } else {
          CHECK(q.ids[i] == Vocabulary::kPad);
        }
      }
      CHECK(real >= 1);
    }
    CHECK(batch.targets[0].front() == Vocabulary::kBos);
    CHECK(batch.targets[0].back() == Vocabulary::kEos);
  }
}

TEST_CASE("batch layout is a pure function of the seed") {
  std::vector<Session> corpus;
  for (int i = 0; i < 6; ++i) {
    corpus.push_back(session_of({{"a"}, {"b"}, {"c"}, {"d"}}));
  }
  Vocabulary vocab = build_vocab(corpus, 1);
  std::vector<PairExample> examples = unroll_pairs(corpus, vocab);
  REQUIRE(examples.size() == 18);

  auto layout = [&](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<SessionBatch> batches = make_batches(examples, 4, 4, rng);
    std::string key;
    for (const SessionBatch& b : batches) {
      key += std::to_string(b.prefix_len) + ":" +
             std::to_string(b.targets.size()) + ";";
      for (const auto& t : b.targets) {
        for (int id : t) key += std::to_string(id) + ",";
      }
    }
    return key;
  };
  CHECK(layout(1) == layout(1));
  CHECK(layout(1) != layout(2));

  Rng rng(1);
  std::vector<SessionBatch> batches = make_batches(examples, 4, 4, rng);
  CHECK(total_examples(batches) == 18);
  std::size_t capped = 0;
  for (const SessionBatch& b : batches) {
    CHECK(b.targets.size() <= 4);
    if (b.targets.size() == 4) ++capped;
  }
  CHECK(capped >= 3);
}

TEST_CASE("batching rejects sequences that cannot fit the query width") {
  PairExample ex;
  ex.source = {{4, 5}};
  ex.target = {4, 5, 6, 7, 8};
  Rng rng(0);
  CHECK_THROWS_AS(make_batches({ex}, 4, 4, rng), FormatError);
  ex.target = {4};
  ex.source = {{4, 5, 6, 7, 8}};
  CHECK_THROWS_AS(make_batches({ex}, 4, 4, rng), FormatError);
  ex.source = {{4, 5}};
  CHECK_THROWS_AS(make_batches({ex}, 0, 4, rng), ConfigError);
}

TEST_CASE("session splits partition deterministically by seed") {
  std::vector<Session> sessions;
  for (int i = 0; i < 8; ++i) {
    sessions.push_back(session_of({{"q" + std::to_string(i)}, {"a"}, {"b"}}));
  }
  SplitRatios ratios;
  ratios.train = 0.5;
  ratios.valid = 0.25;
  ratios.test = 0.25;

  Rng rng1(9);
  SplitSessions a = split_sessions(sessions, ratios, rng1);
  CHECK(a.train.size() == 4);
  CHECK(a.valid.size() == 2);
  CHECK(a.test.size() == 2);

  Rng rng2(9);
  SplitSessions b = split_sessions(sessions, ratios, rng2);
  CHECK(sessions_to_text(a.train) == sessions_to_text(b.train));
  CHECK(sessions_to_text(a.valid) == sessions_to_text(b.valid));

  std::size_t total = a.train.size() + a.valid.size() + a.test.size();
  CHECK(total == sessions.size());

  SplitRatios bad;
  bad.train = 0.0;
  Rng rng3(0);
  CHECK_THROWS_AS(split_sessions(sessions, bad, rng3), ConfigError);
}

TEST_CASE("prepared-dataset text round-trips sessions") {
  std::vector<Session> sessions = {
      session_of({{"car", "parts"}, {"used", "cars"}, {"dealers"}}),
      session_of({{"a"}, {"b", "c"}, {"d"}})};
  std::string text = sessions_to_text(sessions);
  CHECK(text == "car parts\tused cars\tdealers\na\tb c\td\n");
  std::vector<Session> back = sessions_from_text(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0].queries == sessions[0].queries);
  CHECK(back[1].queries == sessions[1].queries);
  CHECK_THROWS_AS(sessions_from_text("a\t\tb\n"), FormatError);
}

TEST_CASE("pipeline from raw log to batches is deterministic end to end") {
  std::string log;
  const std::int64_t step = 60;
  auto add = [&](int user, const std::string& q, std::int64_t minute) {
    log += std::to_string(user) + "\t" + q + "\t2006-03-01 08:" +
           (minute < 10 ? "0" : "") + std::to_string(minute) + ":00\n";
    (void)step;
  };
  add(1, "Car Parts", 0);
  add(1, "used cars", 2);
  add(1, "car dealers", 5);
  add(2, "flowers", 0);
  add(2, "flower shop", 3);
  add(2, "roses", 7);
  add(2, "roses", 8);

  auto run = [&] {
    std::istringstream in(log);
    std::vector<LogRecord> records = parse_log(in);
    sort_records(records);
    std::vector<Session> sessions =
        filter_and_normalize(sessionize(records));
    Vocabulary vocab = build_vocab(sessions, 1);
    Rng rng(5);
    std::vector<SessionBatch> batches =
        make_batches(unroll_pairs(sessions, vocab), 2, 10, rng);
    std::string key = vocab.to_text() + "|";
    for (const SessionBatch& b : batches) {
      for (const auto& src : b.sources) {
        for (const EncodedQuery& q : src) {
          for (int id : q.ids) key += std::to_string(id) + ",";
        }
      }
      for (const auto& t : b.targets) {
        for (int id : t) key += std::to_string(id) + ".";
      }
      key += ";";
    }
    return key;
  };
  std::string first = run();
  CHECK(first == run());
  CHECK(first.find("flower") != std::string::npos);
}

}
