#include <chrono>
#include <cmath>
#include <fstream>

#include "clustr/harness/run.hpp"
#include "clustr/rng.hpp"
#include "clustr/serialize.hpp"

namespace clustr::harness {

using nlohmann::json;

namespace {

/// Epoch-wise shuffled batches; a batch covering the whole set is the set in index order.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::size_t batch, std::uint64_t seed) : count_(count), batch_(batch), seed_(seed) {}

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    if (batch_ >= count_) {
      for (std::size_t i = 0; i < count_; ++i) out.push_back(i);
      return out;
    }
    while (out.size() < batch_) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(count_);
    for (std::size_t i = 0; i < count_; ++i) order_[i] = i;
    CounterRng rng(seed_, "batches/epoch" + std::to_string(epoch_++));
    for (std::size_t i = count_ - 1; i > 0; --i) std::swap(order_[i], order_[rng() % (i + 1)]);
    cursor_ = 0;
  }

  std::size_t count_, batch_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

template <typename T>
std::size_t argmax_row(const Tensor<T>& logits) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.size(); ++k) {
    if (logits[k] > logits[best]) best = k;
  }
  return best;
}

template <typename T>
double evaluate(const model::Model<T>& net, const std::vector<Tensor<T>>& images,
                const std::vector<std::size_t>& labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Tape<T> tape(false);
    if (argmax_row(net.forward_image(tape, images[i]).value()) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

void check_data(const RunConfig& run, const Dataset& data) {
  if (data.count() == 0) throw ConfigError("training set is empty");
  if (data.size != run.model.image_size || data.channels != run.model.in_channels) {
    throw ConfigError("dataset images do not match the model input geometry");
  }
  for (std::size_t l : data.labels) {
    if (l >= run.model.num_classes) throw ConfigError("label " + std::to_string(l) + " exceeds the classifier");
  }
}

[[noreturn]] void abort_numeric(const RunConfig& run, const Dataset& data, std::size_t step,
                                const std::vector<std::size_t>& batch, const std::string& why) {
  std::string where;
  if (!run.out_dir.empty()) {
    const auto dir = run.out_dir / "nan_dump";
    std::filesystem::create_directories(dir);
    save_ctr1(dir / "batch.ctr1", stack_images(data, batch));
    std::vector<std::size_t> labels;
    for (std::size_t i : batch) labels.push_back(data.labels[i]);
    std::ofstream(dir / "dump.json") << json{{"step", step}, {"indices", batch}, {"labels", labels}, {"error", why}}.dump(2)
                                     << '\n';
    where = "; batch dumped to " + dir.string();
  }
  throw NumericError("training step " + std::to_string(step) + ": " + why + where);
}

void write_outputs(const RunConfig& run, const TrainResult& result) {
  const auto& dir = run.out_dir;
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "metrics.csv");
  emit_report(result.records, ReportFormat::csv, csv);
  std::ofstream js(dir / "metrics.json");
  emit_report(result.records, ReportFormat::json, js);
  std::ofstream timing(dir / "timing.csv");
  write_timing_csv(result.records, timing);
  const json summary{{"variant", run.model.variant},
                     {"seed", run.seed},
                     {"precision", run.precision == Precision::f32 ? "f32" : "f64"},
                     {"params", result.params},
                     {"steps_run", result.steps_run},
                     {"final_loss", result.final_loss},
                     {"final_accuracy", result.final_accuracy},
                     {"reached_target", result.reached_target}};
  std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
}

}  // namespace

template <typename T>
TrainResult train(const RunConfig& run, const Dataset& data) {
  check_data(run, data);
  model::Model<T> net(run.model, run.seed);
  AdamW<T> opt(net.params().all(), run.optimizer);
  std::vector<Tensor<T>> images;
  for (const auto& img : data.images) images.push_back(img.template cast<T>());

  TrainResult result;
  result.params = net.count_params();
  BatchSampler sampler(data.count(), run.optimizer.batch_size, run.seed);
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < run.optimizer.steps; ++step) {
    const auto batch = sampler.next();
    const double lr = learning_rate(step, run.optimizer);
    const T inv = T(1) / static_cast<T>(batch.size());
    net.params().zero_grad();
    std::vector<attention::LayerMacs> macs;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    try {
      for (std::size_t b = 0; b < batch.size(); ++b) {
        Tape<T> tape;
        attention::ForwardContext ctx;
        if (b == 0) ctx.mac_log = &macs;
        auto logits = net.forward_image(tape, images[batch[b]], ctx);
        const std::vector<std::size_t> label{data.labels[batch[b]]};
        auto loss = cross_entropy(logits, label);
        const double l = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(l)) throw NumericError("non-finite loss");
        loss_sum += l;
        if (argmax_row(logits.value()) == label[0]) ++correct;
        tape.backward(scale(loss, inv));
      }
      opt.step(lr);
    } catch (const NumericError& e) {
      abort_numeric(run, data, step, batch, e.what());
    }

    MetricsRecord rec;
    rec.step = step + 1;
    rec.loss = loss_sum / static_cast<double>(batch.size());
    rec.batch_accuracy = static_cast<double>(correct) / static_cast<double>(batch.size());
    rec.learning_rate = lr;
    for (const auto& m : macs) rec.layer_macs.emplace_back(m.layer, m.measured);
    const bool last = step + 1 == run.optimizer.steps;
    if ((step + 1) % run.eval_every == 0 || last) {
      rec.train_accuracy = evaluate(net, images, data.labels);
      result.final_accuracy = *rec.train_accuracy;
      if (run.target_accuracy && *rec.train_accuracy >= *run.target_accuracy) result.reached_target = true;
    }
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.records.push_back(std::move(rec));
    result.steps_run = step + 1;
    if (result.reached_target) break;
  }
  result.final_loss = result.records.back().loss;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!run.out_dir.empty()) {
    write_outputs(run, result);
    if (run.save_checkpoint) model::save_checkpoint(net, run.out_dir / "checkpoint");
  }
  return result;
}

TrainResult train(const RunConfig& run, const Dataset& data) {
  return run.precision == Precision::f32 ? train<float>(run, data) : train<double>(run, data);
}

template TrainResult train<float>(const RunConfig&, const Dataset&);
template TrainResult train<double>(const RunConfig&, const Dataset&);

}  // namespace clustr::harness
