// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>
#include <sstream>

#include "ctvr/backbone.hpp"
#include "ctvr/cli.hpp"
#include "ctvr/errors.hpp"
#include "ctvr/eval.hpp"
#include "ctvr/featuredb.hpp"
#include "ctvr/harness.hpp"
#include "ctvr/losses.hpp"
#include "ctvr/model.hpp"
#include "ctvr/taskgen.hpp"

namespace py = pybind11;
using namespace ctvr;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

nn::Tensor to_tensor(const Array& a) {
  nn::Shape shape(a.shape(), a.shape() + a.ndim());
  return nn::Tensor::from(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

nn::Tensor to_matrix(const Array& a, const char* what) {
  if (a.ndim() != 2) throw InputError(std::string(what) + " must be a 2-d array");
  return to_tensor(a);
}

Array to_array(const nn::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

cli::CliConfig config_from(const std::map<std::string, std::string>& overrides) {
  auto kv = cli::to_key_values(cli::CliConfig{});
  std::vector<std::string> sets;
  for (const auto& [k, v] : overrides) sets.push_back(k + "=" + v);
  cli::apply_overrides(kv, sets);
  return cli::to_config(kv);
}

// The stream keeps a copy of its config; held by shared_ptr so pairs and
// models created from it can outlive Python references to the stream.
struct Stream {
  std::shared_ptr<const data::TaskStream> s;

  const data::Pair& pair(std::uint64_t video_id) const {
    for (const auto& t : s->tasks)
      for (const auto& p : t.pairs)
        if (p.video_id == video_id) return p;
    throw InputError("no pair with video_id " + std::to_string(video_id));
  }
};

py::dict pair_dict(const data::Pair& p) {
  py::dict d;
  d["task"] = p.task;
  d["category"] = p.category;
  d["video_id"] = p.video_id;
  d["query_tokens"] = p.query_tokens;
  d["test"] = p.test;
  return d;
}

py::dict run_dict(const harness::RunResult& r) {
  py::dict d;
  d["report"] = py::module_::import("json").attr("loads")(r.final_report.to_json());
  std::vector<std::vector<double>> ledger;
  for (std::size_t t = 1; t <= r.ledger.rows(); ++t) {
    std::vector<double> row;
    for (std::size_t i = 1; i <= t; ++i) row.push_back(r.ledger.at(t, i));
    ledger.push_back(std::move(row));
  }
  d["ledger"] = ledger;
  d["mean_bwf"] = r.mean_bwf();
  d["backbone_unchanged"] = r.backbone_checksum_before == r.backbone_checksum_after;
  d["changed"] = std::vector<std::string>(r.changed.begin(), r.changed.end());
  d["historical_reextractions"] = r.extraction.historical_reextractions;
  return d;
}

eval::RunLedger ledger_from(const std::vector<std::vector<double>>& rows) {
  eval::RunLedger l;
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t].size() != t + 1) throw InputError("ledger row " + std::to_string(t + 1) + " needs " +
                                                  std::to_string(t + 1) + " entries");
    for (std::size_t i = 0; i <= t; ++i) l.set(t + 1, i + 1, rows[t][i]);
  }
  return l;
}

losses::SimilarityBatch batch_from(const Array& q, const Array& v, const std::optional<Array>& refs, double tau) {
  losses::SimilarityBatch b;
  b.q = to_matrix(q, "q");
  b.v = to_matrix(v, "v");
  if (refs) b.refs = to_matrix(*refs, "refs");
  b.tau = tau;
  return b;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Continual text-to-video retrieval core";

  auto base = py::register_exception<Error>(m, "CtvrError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def("default_config", [] { return cli::to_key_values(cli::CliConfig{}); },
        "Every configuration key with its default value, as strings.");
  m.def("render_config", [](const std::map<std::string, std::string>& overrides) {
    return cli::render_config(config_from(overrides));
  }, py::arg("overrides") = std::map<std::string, std::string>{});

  py::class_<Stream>(m, "Stream")
      .def_property_readonly("tasks", [](const Stream& s) { return s.s->tasks.size(); })
      .def("pairs", [](const Stream& s, std::size_t t, std::optional<bool> test) {
        if (t < 1 || t > s.s->tasks.size()) throw InputError("task " + std::to_string(t) + " out of range");
        py::list out;
        for (const auto& p : s.s->tasks[t - 1].pairs)
          if (!test || p.test == *test) out.append(pair_dict(p));
        return out;
      }, py::arg("task"), py::arg("test") = py::none())
      .def("write_manifest", [](const Stream& s, const std::filesystem::path& p) {
        std::ofstream out(p);
        if (!out) throw InputError("cannot write " + p.string());
        data::write_manifest(out, *s.s);
      }, py::arg("path"))
      .def("render", [](const Stream& s, std::uint64_t video_id) {
        const auto v = data::render_video(*s.s, s.pair(video_id));
        Array out({v.frames, v.patches, v.width});
        std::copy(v.data.begin(), v.data.end(), out.mutable_data());
        return out;
      }, py::arg("video_id"));

  m.def("generate_stream", [](const std::map<std::string, std::string>& overrides) {
    return Stream{std::make_shared<const data::TaskStream>(data::generate_stream(config_from(overrides).run.stream))};
  }, py::arg("overrides") = std::map<std::string, std::string>{});

  py::class_<backbone::BackboneParams>(m, "Backbone")
      .def_property_readonly("checksum", &backbone::BackboneParams::checksum)
      .def_property_readonly("width", [](const backbone::BackboneParams& b) { return b.config.width; })
      .def("save", [](const backbone::BackboneParams& b, const std::filesystem::path& p) { model::save_backbone(p, b); });

  m.def("pretrain", [](const Stream& s, const std::map<std::string, std::string>& overrides) {
    const auto cfg = config_from(overrides).run;
    py::gil_scoped_release nogil;
    auto bb = backbone::init_backbone(cfg.backbone);
    backbone::pretrain_backbone(bb, *s.s, cfg.pretrain);
    return bb;
  }, py::arg("stream"), py::arg("overrides") = std::map<std::string, std::string>{});
  m.def("load_backbone", &model::load_backbone, py::arg("path"));

  m.def("run_stream", [](const Stream& s, const backbone::BackboneParams& frozen,
                         const std::map<std::string, std::string>& overrides,
                         std::optional<std::filesystem::path> out_dir) {
    const auto cfg = config_from(overrides).run;
    harness::RunResult r;
    {
      py::gil_scoped_release nogil;
      r = harness::run_stream(*s.s, frozen, cfg, harness::RunOptions{out_dir, {}});
    }
    return run_dict(r);
  }, py::arg("stream"), py::arg("backbone"), py::arg("overrides") = std::map<std::string, std::string>{},
        py::arg("out_dir") = py::none());

  py::class_<model::Model>(m, "Model")
      .def_property_readonly("width", &model::Model::width)
      .def_property_readonly("tasks", [](const model::Model& mo) { return mo.bank().size(); })
      .def("encode_queries", [](const model::Model& mo, const std::vector<std::vector<std::int32_t>>& queries,
                                std::size_t prototype) {
        std::vector<const std::vector<std::int32_t>*> ptrs;
        for (const auto& q : queries) ptrs.push_back(&q);
        nn::NoGradGuard g;
        return to_array(mo.encode_queries(ptrs, prototype));
      }, py::arg("queries"), py::arg("prototype"))
      .def("encode_videos", [](const model::Model& mo, const Stream& s, const std::vector<std::uint64_t>& ids) {
        std::vector<data::Video> videos;
        for (auto id : ids) videos.push_back(data::render_video(*s.s, s.pair(id)));
        std::vector<const data::Video*> ptrs;
        for (const auto& v : videos) ptrs.push_back(&v);
        nn::NoGradGuard g;
        return to_array(mo.encode_videos(ptrs));
      }, py::arg("stream"), py::arg("video_ids"));
  m.def("load_model", &model::load_model, py::arg("path"));

  m.def("read_store", [](const std::filesystem::path& p) {
    const auto db = featuredb::read_store(p);
    const auto range = db.load_range(db.max_task());
    py::dict d;
    d["features"] = to_array(range.features);
    d["video_ids"] = range.video_ids;
    d["task_ids"] = range.task_ids;
    d["category_ids"] = range.category_ids;
    return d;
  }, py::arg("path"));

  m.def("rank_videos", [](const Array& q, const Array& pool) {
    const auto t = to_tensor(q);
    return eval::rank_videos(t.values(), to_matrix(pool, "pool"));
  }, py::arg("query"), py::arg("pool"));
  m.def("recall_at_k", [](const std::vector<std::size_t>& ranks, std::size_t k) { return eval::recall_at_k(ranks, k); },
        py::arg("ranks"), py::arg("k"));
  m.def("median_mean_rank", [](const std::vector<std::size_t>& ranks) { return eval::median_mean_rank(ranks); },
        py::arg("ranks"));
  m.def("backward_forgetting", [](const std::vector<std::vector<double>>& ledger, std::size_t t) {
    return eval::backward_forgetting(ledger_from(ledger), t);
  }, py::arg("ledger"), py::arg("t"), "ledger[t-1][i-1] is R@1 on task i after training task t.");

  m.def("infonce", [](const Array& q, const Array& v, double tau) {
    const auto p = losses::infonce_pair(batch_from(q, v, std::nullopt, tau));
    return std::make_pair(p.v2t.item(), p.t2v.item());
  }, py::arg("q"), py::arg("v"), py::arg("tau") = 0.05, "Returns (v2t, t2v).");
  m.def("ct_loss", [](const Array& q, const Array& v, std::optional<Array> refs, double tau) {
    return losses::ct_loss(batch_from(q, v, refs, tau)).item();
  }, py::arg("q"), py::arg("v"), py::arg("refs") = py::none(), py::arg("tau") = 0.05);
  m.def("total_loss", [](const Array& q, const Array& v, std::optional<Array> refs, double beta, double tau) {
    return losses::total_loss(batch_from(q, v, refs, tau), beta).item();
  }, py::arg("q"), py::arg("v"), py::arg("refs") = py::none(), py::arg("beta") = 0.6, py::arg("tau") = 0.05);

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::vector<std::string> argv = {"ctvr"};
    argv.insert(argv.end(), args.begin(), args.end());
    std::vector<const char*> ptrs;
    for (const auto& a : argv) ptrs.push_back(a.c_str());
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release nogil;
      code = cli::run_cli(static_cast<int>(ptrs.size()), ptrs.data(), out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), "Runs the command line in-process; returns (exit code, stdout, stderr).");
}
