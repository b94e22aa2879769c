#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <fstream>
#include <random>

#include "vapipe/codebooks.hpp"
#include "vapipe/io.hpp"
#include "test_helpers.hpp"

using namespace vapipe;

namespace {

std::string write_file(const std::filesystem::path& dir, const std::string& name,
                       const std::string& contents) {
  const auto path = dir / name;
  std::ofstream out(path, std::ios::binary);
  out << contents;
  return path.string();
}

}  // namespace

TEST_CASE("load_records") {
  const auto dir = testing::fresh_dir("records");
  const auto book = builtin_codebook(AgeGroup::adult);

  SECTION("well-formed file loads every row") {
    const auto path = write_file(dir, "ok.csv",
                                 "id,site,age_group,age_value,sex,narrative,gs_text,q1,q2\n"
                                 "r1,Dar,adult,61,male,Fever for a week,Stroke,Yes,No\n"
                                 "r2,Dar,adult,45,female,,TB,No,\n"
                                 "r3,Mexico,adult,70,male,\"Chest pain, then collapse\",Stroke,Yes,Yes\n");
    const auto records = load_records(path, book);
    REQUIRE(records.size() == 3);
    CHECK(records[0].symptoms.at("q1") == TriState::yes);
    CHECK(records[0].symptoms.at("q2") == TriState::no);
    CHECK(records[1].narrative == std::nullopt);
    CHECK(records[1].symptoms.at("q2") == TriState::missing);
    CHECK(records[2].narrative.value() == "Chest pain, then collapse");
    CHECK(book.label(records[0].true_cause.value()) == "Stroke");
  }

  SECTION("lowercase cause resolves through the pipeline") {
    const auto path = write_file(dir, "case.csv",
                                 "id,site,age_group,age_value,sex,narrative,gs_text,q1\n"
                                 "r1,Dar,adult,50,male,,acute myocardial infarction,Yes\n");
    const auto records = load_records(path, book);
    REQUIRE(records.size() == 1);
    CHECK(book.label(records[0].true_cause.value()) == "Acute Myocardial Infarction");
  }

  SECTION("empty gs_text means unlabeled") {
    const auto path = write_file(dir, "nolabel.csv",
                                 "id,site,age_group,age_value,sex,narrative,gs_text,q1\n"
                                 "r1,Dar,adult,50,male,text,,Yes\n");
    const auto records = load_records(path, book);
    CHECK_FALSE(records[0].true_cause.has_value());
  }

  SECTION("duplicate id is rejected") {
    const auto path = write_file(dir, "dup.csv",
                                 "id,site,age_group,age_value,sex,narrative,gs_text,q1\n"
                                 "r1,Dar,adult,50,male,,Stroke,Yes\n"
                                 "r1,Dar,adult,51,male,,Stroke,Yes\n");
    CHECK_THROWS_WITH(load_records(path, book), Catch::Matchers::ContainsSubstring("duplicate id"));
  }

  SECTION("unresolvable cause names the row") {
    const auto path = write_file(dir, "badcause.csv",
                                 "id,site,age_group,age_value,sex,narrative,gs_text,q1\n"
                                 "r1,Dar,adult,50,male,,Stroke,Yes\n"
                                 "r2,Dar,adult,50,male,,Imaginitis,Yes\n");
    CHECK_THROWS_WITH(load_records(path, book), Catch::Matchers::ContainsSubstring("row 3"));
  }

  SECTION("reject mode accounts for every input row") {
    const auto path = write_file(dir, "mixed.csv",
                                 "id,site,age_group,age_value,sex,narrative,gs_text,q1\n"
                                 "r1,Dar,adult,50,male,,Stroke,Yes\n"
                                 "r2,Dar,adult,fifty,male,,Stroke,Yes\n"
                                 "r3,Dar,adult,50,male,,Imaginitis,Yes\n"
                                 "r4,Dar,adult,50,male,,TB,maybe\n"
                                 "r5,Dar,adult,50,male,,TB,No\n");
    std::vector<RowReject> rejects;
    const auto records = load_records(path, book, &rejects);
    CHECK(records.size() + rejects.size() == 5);
    CHECK(records.size() == 2);
    REQUIRE(rejects.size() == 3);
    CHECK(rejects[0].row == 3);
  }

  SECTION("header must match the documented schema") {
    const auto path = write_file(dir, "badheader.csv", "id,place,age_group\nr1,Dar,adult\n");
    CHECK_THROWS_AS(load_records(path, book), ValidationError);
  }

  SECTION("round trip through write_records") {
    const auto path = write_file(dir, "rt.csv",
                                 "id,site,age_group,age_value,sex,narrative,gs_text,q1,q2\n"
                                 "r1,Dar,adult,61,male,Fever,Stroke,Yes,No\n"
                                 "r2,Pemba,adult,45,female,,TB,,Yes\n");
    const auto records = load_records(path, book);
    const auto out_path = (dir / "rt_out.csv").string();
    write_records(out_path, records, book);
    const auto back = load_records(out_path, book);
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].id == records[i].id);
      CHECK(back[i].site == records[i].site);
      CHECK(back[i].true_cause == records[i].true_cause);
      CHECK(back[i].narrative == records[i].narrative);
      CHECK(back[i].symptoms == records[i].symptoms);
    }
  }
}

TEST_CASE("load_embeddings csv") {
  const auto dir = testing::fresh_dir("embed");

  SECTION("2 rows x 4 dims") {
    const auto path = write_file(dir, "e.csv",
                                 "id,f0,f1,f2,f3\n"
                                 "r1,0.5,1.5,-2.0,3.25\n"
                                 "r2,1,2,3,4\n");
    const auto table = load_embeddings(path);
    CHECK(table.dim == 4);
    REQUIRE(table.by_id.size() == 2);
    CHECK(table.by_id.at("r1")[3] == Catch::Approx(3.25));
  }

  SECTION("NaN rejected with row id") {
    const auto path = write_file(dir, "nan.csv",
                                 "id,f0,f1\n"
                                 "r1,0.5,nan\n");
    CHECK_THROWS_WITH(load_embeddings(path), Catch::Matchers::ContainsSubstring("r1"));
  }

  SECTION("ragged rows rejected") {
    const auto path = write_file(dir, "ragged.csv",
                                 "id,f0,f1\n"
                                 "r1,0.5\n");
    CHECK_THROWS_AS(load_embeddings(path), ValidationError);
  }

  SECTION("1024-dim rows pass through unchanged") {
    std::ostringstream content;
    content << "id";
    for (int i = 0; i < 1024; ++i) content << ",f" << i;
    content << "\nr1";
    for (int i = 0; i < 1024; ++i) content << "," << (i * 0.001);
    content << "\n";
    const auto path = write_file(dir, "big.csv", content.str());
    const auto table = load_embeddings(path);
    CHECK(table.dim == 1024);
    CHECK(table.by_id.at("r1").size() == 1024);
  }
}

TEST_CASE("binary embeddings round trip bit-exactly") {
  const auto dir = testing::fresh_dir("embedbin");
  EmbeddingTable table;
  table.dim = 7;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> unit(-5.0f, 5.0f);
  for (int r = 0; r < 23; ++r) {
    std::vector<float> row(table.dim);
    for (float& v : row) v = unit(rng);
    table.by_id.emplace("case-" + std::to_string(r), std::move(row));
  }
  const auto path = (dir / "table.f32").string();
  write_embeddings_binary(path, table);
  const auto back = load_embeddings(path);
  REQUIRE(back.dim == table.dim);
  REQUIRE(back.by_id.size() == table.by_id.size());
  for (const auto& [id, row] : table.by_id) {
    const auto& got = back.by_id.at(id);
    REQUIRE(got.size() == row.size());
    CHECK(std::memcmp(got.data(), row.data(), row.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("prediction interchange") {
  const auto dir = testing::fresh_dir("preds");
  const auto book = testing::small_codebook(4);

  SECTION("probs line accepted and normalized") {
    const auto path = write_file(dir, "p.jsonl",
                                 R"({"id":"r1","method":"m","probs":[0.25,0.25,0.25,0.25]})"
                                 "\n"
                                 R"({"id":"r2","method":"m","probs":[0.4,0.3,0.2,0.099999]})"
                                 "\n");
    const auto set = load_predictions(path, book);
    REQUIRE(set.by_id.size() == 2);
    CHECK(set.method == "m");
    double sum = 0.0;
    const auto& p = set.by_id.at("r2").probs.value();
    for (std::size_t i = 0; i < p.size(); ++i) sum += p[i];
    CHECK(std::abs(sum - 1.0) <= kProbSumTol);
  }

  SECTION("probs too far off are rejected") {
    const auto path = write_file(dir, "bad.jsonl", R"({"id":"r1","probs":[0.5,0.3,0.1,0.0]})" "\n");
    CHECK_THROWS_AS(load_predictions(path, book), ValidationError);
  }

  SECTION("wrong length rejected") {
    const auto path = write_file(dir, "short.jsonl", R"({"id":"r1","probs":[0.5,0.5]})" "\n");
    CHECK_THROWS_WITH(load_predictions(path, book), Catch::Matchers::ContainsSubstring("length"));
  }

  SECTION("ranked entries resolve labels") {
    const auto path = write_file(
        dir, "ranked.jsonl",
        R"({"id":"r1","method":"llm","ranked":[{"cause":"Cause B","confidence":"high"},{"cause":"cause a","confidence":"low"}]})"
        "\n");
    const auto set = load_predictions(path, book);
    const auto& ranked = set.by_id.at("r1").ranked.value();
    REQUIRE(ranked.entries.size() == 2);
    CHECK(ranked.entries[0].cause == 1);
    CHECK(ranked.entries[0].confidence == Confidence::high);
    CHECK(ranked.entries[1].cause == 0);
  }

  SECTION("unknown ranked cause rejected") {
    const auto path =
        write_file(dir, "unknown.jsonl", R"({"id":"r1","ranked":[{"cause":"Cause Z"}]})" "\n");
    CHECK_THROWS_AS(load_predictions(path, book), ValidationError);
  }

  SECTION("empty set refuses to serialize") {
    PredictionSet empty;
    empty.method = "m";
    CHECK_THROWS_AS(write_predictions((dir / "empty.jsonl").string(), empty, book), ValidationError);
  }

  SECTION("write then load is the identity within 1e-12") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unit(0.01, 1.0);
    PredictionSet set;
    set.method = "mixed";
    for (int i = 0; i < 40; ++i) {
      Prediction pred;
      std::vector<double> raw(4);
      for (double& v : raw) v = unit(rng);
      pred.probs = normalize(raw);
      if (i % 2 == 0) {
        RankedPrediction ranked;
        ranked.entries.push_back({rng() % 4, Confidence::high});
        std::size_t second = rng() % 4;
        if (second != ranked.entries[0].cause) ranked.entries.push_back({second, Confidence::medium});
        pred.ranked = ranked;
      }
      set.by_id.emplace("case-" + std::to_string(i), std::move(pred));
    }
    const auto path = (dir / "rt.jsonl").string();
    write_predictions(path, set, book);
    const auto back = load_predictions(path, book);
    REQUIRE(back.by_id.size() == set.by_id.size());
    CHECK(back.method == set.method);
    for (const auto& [id, pred] : set.by_id) {
      const auto& got = back.by_id.at(id);
      REQUIRE(got.probs.has_value() == pred.probs.has_value());
      if (pred.probs) {
        for (std::size_t c = 0; c < pred.probs->size(); ++c) {
          CHECK(std::abs((*got.probs)[c] - (*pred.probs)[c]) < 1e-12);
        }
      }
      CHECK(got.ranked == pred.ranked);
    }
  }

  SECTION("line carrying both forms keeps both") {
    PredictionSet set;
    set.method = "m";
    Prediction pred;
    pred.probs = ProbVector(std::vector<double>{0.7, 0.1, 0.1, 0.1});
    pred.ranked = RankedPrediction{{{0, Confidence::high}}};
    set.by_id.emplace("r1", pred);
    const auto path = (dir / "both.jsonl").string();
    write_predictions(path, set, book);
    const auto back = load_predictions(path, book);
    CHECK(back.by_id.at("r1").probs.has_value());
    CHECK(back.by_id.at("r1").ranked.has_value());
  }
}
