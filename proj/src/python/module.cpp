#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "melfuse/audio.hpp"
#include "melfuse/dataset.hpp"
#include "melfuse/metrics.hpp"
#include "melfuse/model_io.hpp"
#include "melfuse/retrieval.hpp"
#include "melfuse/stemmer.hpp"

namespace py = pybind11;
using namespace melfuse;

namespace {

audio::AudioClip clip_from(const py::array_t<float, py::array::c_style | py::array::forcecast>& s,
                           int rate) {
  if (s.ndim() != 1) throw std::invalid_argument("samples must be a 1-d array");
  audio::AudioClip c;
  c.sample_rate = rate;
  c.samples.assign(s.data(), s.data() + s.size());
  return c;
}

py::array_t<float> mel_to_array(const Tensor& t) {
  py::array_t<float> out({t.shape[0], t.shape[1]});
  std::memcpy(out.mutable_data(), t.data->data(), t.numel() * sizeof(float));
  return out;
}

Tensor mel_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("mel must be a 2-d array [bands x frames]");
  Tensor t = Tensor::zeros({static_cast<std::size_t>(a.shape(0)),
                            static_cast<std::size_t>(a.shape(1))});
  std::memcpy(t.data->data(), a.data(), t.numel() * sizeof(float));
  return t;
}

// Model plus the vocabulary it was trained with.
struct PyModel {
  model::FusionModel net;
  text::Vocabulary vocab;

  PyModel(model::FusionModel m, text::Vocabulary v) : net(std::move(m)), vocab(std::move(v)) {}
};

}  // namespace

PYBIND11_MODULE(melfuse, m) {
  m.doc() = "Multimodal lyric interpretation: audio features, tokenizer, fusion "
            "encoder-decoder, metrics and retrieval primitives.";
  m.attr("__version__") = "0.1.0";

  m.def(
      "resample",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& samples, int rate,
         int target) {
        audio::AudioClip out = audio::resample(clip_from(samples, rate), target);
        py::array_t<float> arr(static_cast<py::ssize_t>(out.samples.size()));
        std::memcpy(arr.mutable_data(), out.samples.data(), out.samples.size() * sizeof(float));
        return arr;
      },
      py::arg("samples"), py::arg("sample_rate"), py::arg("target_rate") = audio::kTargetRate,
      "Windowed-sinc downsampling to the target rate.");

  m.def(
      "log_mel",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& samples, int rate) {
        audio::AudioClip c = clip_from(samples, rate);
        return mel_to_array(audio::log_mel(c).values);
      },
      py::arg("samples"), py::arg("sample_rate"),
      "Log-mel spectrogram [128 x frames]; resamples above 16 kHz first.");

  m.def("mel_filterbank", []() { return mel_to_array(audio::mel_filterbank()); },
        "The 128 x 257 triangular mel filterbank.");

  py::class_<text::Vocabulary>(m, "Vocabulary")
      .def_static(
          "train",
          [](const std::vector<std::string>& corpus, std::size_t cap) {
            return text::Vocabulary::train(corpus, cap);
          },
          py::arg("corpus"), py::arg("cap") = 8192)
      .def_static("load", &text::Vocabulary::load, py::arg("path"))
      .def("save", &text::Vocabulary::save, py::arg("path"))
      .def("__len__", &text::Vocabulary::size)
      .def("encode_ids", &text::Vocabulary::encode_text, py::arg("text"))
      .def(
          "encode",
          [](const text::Vocabulary& v, const std::string& t, std::size_t max_len) {
            text::EncodedRow row = v.encode(t, max_len);
            std::vector<bool> mask(row.mask.begin(), row.mask.end());
            return py::make_tuple(row.ids, mask);
          },
          py::arg("text"), py::arg("max_len"))
      .def("decode", &text::Vocabulary::decode, py::arg("ids"));

  py::class_<PyModel>(m, "Model")
      .def_static(
          "create",
          [](const std::string& profile, const text::Vocabulary& vocab, std::uint64_t seed) {
            model::ModelConfig cfg = model::ModelConfig::profile(profile, vocab.size());
            return PyModel(model::FusionModel(cfg, seed), vocab);
          },
          py::arg("profile"), py::arg("vocab"), py::arg("seed") = 0)
      .def_static(
          "load",
          [](const std::string& prefix, const std::string& vocab_path) {
            return PyModel(model::load_model(prefix), text::Vocabulary::load(vocab_path));
          },
          py::arg("prefix"), py::arg("vocab_path"))
      .def(
          "save",
          [](const PyModel& self, const std::string& prefix) {
            model::save_model(self.net, prefix);
            self.vocab.save(prefix + ".vocab.txt");
          },
          py::arg("prefix"))
      .def("config_json", [](const PyModel& self) { return self.net.config().to_json(); })
      .def(
          "generate",
          [](PyModel& self, const std::string& lyrics,
             const std::optional<py::array_t<float, py::array::c_style | py::array::forcecast>>&
                 mel,
             std::size_t beam, long max_new) {
            model::GenerateOptions opts;
            opts.mode = beam <= 1 ? model::DecodeMode::greedy : model::DecodeMode::beam;
            opts.beam_width = beam;
            opts.max_new = max_new;
            if (mel) {
              Tensor t = mel_from_array(*mel);
              return model::generate(self.net, self.vocab, lyrics, &t, opts);
            }
            return model::generate(self.net, self.vocab, lyrics, nullptr, opts);
          },
          py::arg("lyrics"), py::arg("mel") = py::none(), py::arg("beam") = 1,
          py::arg("max_new") = 64)
      .def(
          "encode_embedding",
          [](const PyModel& self, const std::string& t) {
            return model::encode_text_embedding(self.net, self.vocab, t);
          },
          py::arg("text"), "Mean-pooled final encoder state of the text-only path.");

  auto metrics_mod = m.def_submodule("metrics", "Summarization and retrieval metrics.");
  metrics_mod.def(
      "rouge_n",
      [](const std::string& c, const std::string& r, int n) {
        const metrics::Prf p = metrics::rouge_n(c, r, n);
        return py::make_tuple(p.precision, p.recall, p.f);
      },
      py::arg("candidate"), py::arg("reference"), py::arg("n") = 1);
  metrics_mod.def(
      "rouge_l",
      [](const std::string& c, const std::string& r) {
        const metrics::Prf p = metrics::rouge_l(c, r);
        return py::make_tuple(p.precision, p.recall, p.f);
      },
      py::arg("candidate"), py::arg("reference"));
  metrics_mod.def("meteor", &metrics::meteor_lite, py::arg("candidate"), py::arg("reference"));
  metrics_mod.def("mrr", &metrics::mrr, py::arg("ranks"), py::arg("n"));
  metrics_mod.def("porter_stem", &metrics::porter_stem, py::arg("word"));

  auto data_mod = m.def_submodule("data", "Dataset filtering helpers.");
  data_mod.def("utf8_length", &data::utf8_length, py::arg("text"));
  data_mod.def(
      "truncate_word_safe",
      [](const std::string& s, std::size_t max_chars) -> std::optional<std::string> {
        return data::truncate_word_safe(s, max_chars);
      },
      py::arg("text"), py::arg("max_chars"));

  py::class_<retrieval::HashedTfIdfEmbedder>(m, "TfIdfEmbedder")
      .def(py::init<std::size_t>(), py::arg("buckets") = 1u << 14)
      .def("fit", &retrieval::HashedTfIdfEmbedder::fit, py::arg("corpus"))
      .def("embed", &retrieval::HashedTfIdfEmbedder::embed, py::arg("text"))
      .def_property_readonly("dim", &retrieval::HashedTfIdfEmbedder::dim);
}
