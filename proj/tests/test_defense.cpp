#include <doctest.h>

#include <algorithm>
#include <set>

#include "helpers.hpp"
#include "poisonlab/data.hpp"
#include "poisonlab/defense.hpp"

using namespace poisonlab;

namespace {

std::vector<Provenance> provenance(std::size_t clean, std::size_t poison) {
  std::vector<Provenance> p(clean, Provenance::kClean);
  p.insert(p.end(), poison, Provenance::kPoison);
  return p;
}

Arch tiny_arch() {
  Arch a;
  a.widths = {4, 8};
  a.strides = {2, 2};
  a.norm_groups = 2;
  a.feature_dim = 8;
  a.head_hidden = 8;
  a.proj_dim = 4;
  return a;
}

DefenseInputs tiny_inputs() {
  DefenseInputs in;
  const auto pre = generate_synthetic(10, 4, 16, 1);
  in.clean = as_unlabeled(pre);
  in.downstream_train = generate_synthetic(6, 4, 16, 2);
  in.downstream_test = generate_synthetic(4, 4, 16, 3);
  TargetTask task;
  task.targets.push_back(in.downstream_test.images[0]);
  task.target_classes.push_back(1);
  task.references.push_back({in.downstream_train.images[1], in.downstream_train.images[5]});
  in.spec.tasks.push_back(task);
  in.spec.budget = 4;
  in.spec.seed = 4;
  in.poisoned = merge_poison(in.clean, build_poison(in.spec), 5);
  in.pretrain.arch = tiny_arch();
  in.pretrain.epochs = 2;
  in.pretrain.batch_size = 8;
  in.pretrain.seed = 6;
  in.linear.epochs = 5;
  in.linear.batch_size = 8;
  in.linear.seed = 7;
  in.clean_accuracy = 0.5;
  return in;
}

}  // namespace

TEST_CASE("fpr and fnr arithmetic") {
  const auto prov = provenance(1000, 12);
  SUBCASE("exact flags") {
    std::vector<std::size_t> flagged;
    for (std::size_t i = 1000; i < 1012; ++i) flagged.push_back(i);
    const auto r = compute_fpr_fnr(flagged, prov);
    CHECK(r.fpr == 0.0);
    CHECK(*r.fnr == 0.0);
  }
  SUBCASE("nothing flagged") {
    const auto r = compute_fpr_fnr({}, prov);
    CHECK(r.fpr == 0.0);
    CHECK(*r.fnr == 1.0);
  }
  SUBCASE("ten clean flagged and three poisons missed") {
    std::vector<std::size_t> flagged;
    for (std::size_t i = 0; i < 10; ++i) flagged.push_back(i * 7);
    for (std::size_t i = 1003; i < 1012; ++i) flagged.push_back(i);
    const auto r = compute_fpr_fnr(flagged, prov);
    CHECK(r.fpr == doctest::Approx(0.01));
    CHECK(*r.fnr == doctest::Approx(0.25));
  }
  SUBCASE("no poisons") { CHECK_FALSE(compute_fpr_fnr({}, provenance(5, 0)).fnr.has_value()); }
  SUBCASE("identities on random provenance") {
    Rng rng(2);
    for (int t = 0; t < 20; ++t) {
      std::vector<Provenance> p;
      std::vector<std::size_t> flagged;
      std::size_t clean = 0, poison = 0, fp = 0, tp = 0;
      for (std::size_t i = 0; i < 200; ++i) {
        const bool is_poison = bernoulli(rng, 0.2);
        p.push_back(is_poison ? Provenance::kPoison : Provenance::kClean);
        (is_poison ? poison : clean)++;
        if (bernoulli(rng, 0.3)) {
          flagged.push_back(i);
          (is_poison ? tp : fp)++;
        }
      }
      const auto r = compute_fpr_fnr(flagged, p);
      CHECK(r.fpr * static_cast<double>(clean) == doctest::Approx(static_cast<double>(fp)));
      CHECK((1.0 - *r.fnr) * static_cast<double>(poison) == doctest::Approx(static_cast<double>(tp)));
    }
  }
  SUBCASE("out of range index") {
    const std::vector<std::size_t> bad{5000};
    CHECK_THROWS(compute_fpr_fnr(bad, prov));
  }
}

TEST_CASE("kmeans") {
  Eigen::MatrixXd pts(6, 2);
  pts << 0, 0, 0.1, 0, 0, 0.1, 10, 10, 10.1, 10, 10, 10.1;
  const auto r = kmeans(pts, 2, 3);
  CHECK(r.assignment[0] == r.assignment[1]);
  CHECK(r.assignment[0] == r.assignment[2]);
  CHECK(r.assignment[3] == r.assignment[5]);
  CHECK(r.assignment[0] != r.assignment[3]);
  CHECK(kmeans(pts, 2, 3).assignment == r.assignment);
  CHECK_THROWS(kmeans(pts, 7, 0));
  CHECK(std::isinf(mean_pairwise_distance(pts.topRows(1))));
  CHECK(mean_pairwise_distance(pts.topRows(2)) == doctest::Approx(0.1));
}

TEST_CASE("kmeans_detect") {
  UnlabeledDataset ds;
  for (int i = 0; i < 100; ++i) {
    ds.images.push_back(testutil::noise(8, 8, 3, 1000 + static_cast<std::uint64_t>(i)));
    ds.provenance.push_back(Provenance::kClean);
  }
  const auto copy = testutil::constant(8, 8, 3, 1.0f);
  for (std::size_t at : {3u, 40u, 41u, 99u}) {
    ds.images.insert(ds.images.begin() + static_cast<long>(at), copy);
    ds.provenance.insert(ds.provenance.begin() + static_cast<long>(at), Provenance::kPoison);
  }

  SUBCASE("the duplicate cluster is flagged") {
    const auto r = kmeans_detect(ds, 5, 1, 11);
    REQUIRE(r.fnr.has_value());
    CHECK(*r.fnr == 0.0);
    std::set<std::size_t> flagged(r.flagged_indices.begin(), r.flagged_indices.end());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.provenance[i] == Provenance::kPoison) CHECK(flagged.count(i) == 1);
    }
    CHECK(std::is_sorted(r.flagged_indices.begin(), r.flagged_indices.end()));
    std::size_t members = 0;
    for (int c : r.flagged_clusters) members += r.cluster_stats[static_cast<std::size_t>(c)].size;
    CHECK(members == r.flagged_indices.size());
    const auto again = kmeans_detect(ds, 5, 1, 11);
    CHECK(again.flagged_indices == r.flagged_indices);
  }
  SUBCASE("flagging every cluster") {
    const auto r = kmeans_detect(ds, 5, 5, 11);
    CHECK(r.fpr == 1.0);
    CHECK(*r.fnr == 0.0);
    CHECK(r.flagged_indices.size() == ds.size());
  }
  SUBCASE("json") {
    const nlohmann::json j = kmeans_detect(ds, 5, 1, 11);
    CHECK(j.contains("flagged_indices"));
    CHECK(j.at("cluster_stats").size() == 5);
  }
}

TEST_CASE("dedup before detection") {
  AttackSpec spec;
  TargetTask task;
  task.targets.push_back(testutil::noise(16, 16, 3, 1));
  task.target_classes.push_back(1);
  task.references.push_back({testutil::noise(16, 16, 3, 2)});
  spec.tasks.push_back(task);
  spec.budget = 100;
  spec.seed = 8;
  const auto clean = as_unlabeled(generate_synthetic(25, 4, 16, 9));
  const auto merged = merge_poison(clean, build_poison(spec), 3);
  const auto dd = dedup(merged);
  CHECK(dd.dataset.count(Provenance::kPoison) <= 4);
  CHECK(dd.removed_indices.size() >= 96);
  const auto det = kmeans_detect(dd.dataset, 10, 4, 1);
  CHECK(det.flagged_indices.size() <= dd.dataset.size());
}

TEST_CASE("plurality vote") {
  CHECK(plurality_vote(std::vector<int>{3, 3, 3}, 4) == 3);
  CHECK(plurality_vote(std::vector<int>{0, 0, 0, 0, 2, 2, 2, 2, 1}, 3) == 0);
  CHECK(plurality_vote(std::vector<int>{2, 2, 2, 2, 0, 0, 0, 0, 1}, 3) == 0);
  CHECK(plurality_vote(std::vector<int>{1, 1, 1, 1, 1, 0, 0, 0, 0}, 2) == 1);
  CHECK_THROWS(plurality_vote(std::vector<int>{}, 2));
  CHECK_THROWS(plurality_vote(std::vector<int>{4}, 2));
}

TEST_CASE("bagging subsamples") {
  const auto a = bagging_subsample(2000, 500, 42, 3);
  CHECK(a == bagging_subsample(2000, 500, 42, 3));
  CHECK(a != bagging_subsample(2000, 500, 42, 4));
  CHECK(a.size() == 500);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
  CHECK(a.back() < 2000);
  CHECK_THROWS(bagging_subsample(10, 11, 0, 0));
}

TEST_CASE("bagging ensembles") {
  const auto in = tiny_inputs();
  SUBCASE("one base equals its classifier") {
    const auto ens = bagging_train(in.poisoned, 1, 30, in.pretrain, in.downstream_train, in.linear, 3);
    REQUIRE(ens.size() == 1);
    const auto direct = ens.base_classifiers[0].predict(extract_features(ens.base_states[0], in.downstream_test.images));
    CHECK(bagging_predict(ens, in.downstream_test.images) == direct);
  }
  SUBCASE("order of bases and worker count do not matter") {
    const auto ens = bagging_train(in.poisoned, 3, 30, in.pretrain, in.downstream_train, in.linear, 3, 1);
    const auto par = bagging_train(in.poisoned, 3, 30, in.pretrain, in.downstream_train, in.linear, 3, 3);
    CHECK(bagging_predict(par, in.downstream_test.images) == bagging_predict(ens, in.downstream_test.images));
    CHECK(par.subsample_indices == ens.subsample_indices);
    BaggingEnsemble rev = ens;
    std::reverse(rev.base_states.begin(), rev.base_states.end());
    std::reverse(rev.base_classifiers.begin(), rev.base_classifiers.end());
    std::reverse(rev.subsample_indices.begin(), rev.subsample_indices.end());
    CHECK(bagging_predict(rev, in.downstream_test.images) == bagging_predict(ens, in.downstream_test.images));
  }
}

TEST_CASE("defense pipelines") {
  auto in = tiny_inputs();
  DefenseParams p;
  p.kmeans_clusters = 4;
  p.kmeans_flagged = 1;
  p.bagging_subsamples = 2;
  p.bagging_subsample_size = 30;
  p.seed = 12;
  const auto poisoned_state = pretrain(in.poisoned, in.pretrain).state;
  const auto undefended =
      evaluate_encoder(poisoned_state, in.downstream_train, in.downstream_test, in.spec, in.linear, in.clean_accuracy);

  SUBCASE("early stop at the full budget is the undefended run") {
    p.early_stop_epochs = in.pretrain.epochs;
    const auto r = run_defense_pipeline(DefenseKind::kEarlyStop, in, p);
    CHECK(r.asr == undefended.asr);
    CHECK(r.pa == undefended.pa);
    CHECK(r.outer_objective == undefended.outer_objective);
    CHECK(r.ca == in.clean_accuracy);
  }
  SUBCASE("no_crop disables cropping") {
    const auto r = run_defense_pipeline("no_crop", in, p);
    CHECK(r.metadata.at("enable_crop") == false);
    CHECK(r.metadata.at("defense") == "no_crop");
  }
  SUBCASE("finetune with no clean data leaves the encoder") {
    p.finetune_fraction = 0.0;
    in.poisoned_state = poisoned_state;
    const auto r = run_defense_pipeline(DefenseKind::kFinetune, in, p);
    CHECK(r.outer_objective == undefended.outer_objective);
    CHECK(r.pa == undefended.pa);
  }
  SUBCASE("dedup and kmeans report detection rates") {
    const auto r = run_defense_pipeline(DefenseKind::kDedupKmeans, in, p);
    REQUIRE(r.fpr.has_value());
    CHECK((*r.fpr >= 0.0 && *r.fpr <= 1.0));
    CHECK(r.metadata.at("rates_computed_on") == "deduplicated dataset");
  }
  SUBCASE("bagging") {
    const auto r = run_defense_pipeline(DefenseKind::kBagging, in, p);
    CHECK((r.asr >= 0.0 && r.asr <= 1.0));
    CHECK(r.metadata.at("subsamples") == 2);
  }
  SUBCASE("names") {
    CHECK(defense_from_string("dedup_kmeans") == DefenseKind::kDedupKmeans);
    CHECK(std::string(to_string(DefenseKind::kBagging)) == "bagging");
    CHECK_THROWS(defense_from_string("spectral"));
    DefenseParams bad;
    bad.kmeans_flagged = 30;
    CHECK_THROWS(bad.validate());
  }
}
