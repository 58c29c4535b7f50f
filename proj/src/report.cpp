/*
 * Copyright (c) 2026 The FineSSL Engine Authors. All Rights Reserved
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <json.hpp>

#include "finessl/trainer.hpp"

namespace finessl {

namespace {

using Json = nlohmann::ordered_json;

Json opt(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace

std::string RunReport::to_jsonl() const {
  std::string out;
  for (const EpochRecord& r : epochs) {
    Json j;
    j["epoch"] = r.epoch;
    j["lr"] = r.lr;
    j["sup_loss"] = opt(r.sup_loss);
    j["unsup_loss"] = opt(r.unsup_loss);
    j["test_acc"] = opt(r.test_acc);
    j["pl_acc"] = opt(r.pl_acc);
    j["pl_entropy"] = r.pl_entropy;
    j["mean_conf"] = r.mean_conf;
    j["mean_conf_confident"] = r.mean_conf_confident;
    j["ece"] = opt(r.ece);
    j["alpha_t"] = r.alpha_t;
    j["delta"] = r.delta;
    j["beta"] = r.beta;
    j["pseudo_label_hist"] = r.pseudo_label_hist;
    j["strategy"] = strategy;
    j["seed"] = seed;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace finessl
