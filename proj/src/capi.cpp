#include "mutab.h"

#include <filesystem>
#include <stdexcept>
#include <string>

#include "mutab/pipeline.hpp"
#include "mutab/teds.hpp"

using mutab::Run;
using mutab::RunStatus;

struct mutab_run {
  Run run;
};

namespace {

thread_local std::string g_last_error;

mutab_status to_status(RunStatus s) {
  return s == RunStatus::Ok ? MUTAB_OK : MUTAB_PARTIAL;
}

template <typename F>
mutab_status guarded(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    g_last_error = e.what();
    return MUTAB_ERR_INVALID_ARGUMENT;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return MUTAB_ERR_IO;
  } catch (const std::ios_base::failure& e) {
    g_last_error = e.what();
    return MUTAB_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    // runtime errors from missing/unreadable files carry io-flavoured text
    std::string msg = e.what();
    if (msg.find("cannot open") != std::string::npos ||
        msg.find("write failed") != std::string::npos ||
        msg.find("cannot write") != std::string::npos) {
      return MUTAB_ERR_IO;
    }
    return MUTAB_ERR_RUNTIME;
  }
}

}  // namespace

extern "C" {

const char* mutab_version(void) { return "0.1.0"; }

const char* mutab_last_error(void) { return g_last_error.c_str(); }

mutab_status mutab_run_create(mutab_run** out) {
  if (!out) {
    g_last_error = "null output pointer";
    return MUTAB_ERR_INVALID_ARGUMENT;
  }
  return guarded([&] {
    *out = new mutab_run();
    return MUTAB_OK;
  });
}

void mutab_run_destroy(mutab_run* run) { delete run; }

mutab_status mutab_run_set(mutab_run* run, const char* key, const char* value) {
  if (!run || !key || !value) {
    g_last_error = "null run, key, or value";
    return MUTAB_ERR_INVALID_ARGUMENT;
  }
  return guarded([&] {
    run->run.set(key, value);
    return MUTAB_OK;
  });
}

mutab_status mutab_run_load_config(mutab_run* run, const char* path) {
  if (!run || !path) {
    g_last_error = "null run or path";
    return MUTAB_ERR_INVALID_ARGUMENT;
  }
  return guarded([&] {
    run->run.load_config_file(path);
    return MUTAB_OK;
  });
}

mutab_status mutab_run_synth(mutab_run* run) {
  if (!run) {
    g_last_error = "null run";
    return MUTAB_ERR_INVALID_ARGUMENT;
  }
  return guarded([&] { return to_status(run->run.run_synth()); });
}

mutab_status mutab_run_train(mutab_run* run) {
  if (!run) {
    g_last_error = "null run";
    return MUTAB_ERR_INVALID_ARGUMENT;
  }
  return guarded([&] { return to_status(run->run.run_train()); });
}

mutab_status mutab_run_infer(mutab_run* run) {
  if (!run) {
    g_last_error = "null run";
    return MUTAB_ERR_INVALID_ARGUMENT;
  }
  return guarded([&] { return to_status(run->run.run_infer()); });
}

mutab_status mutab_run_eval(mutab_run* run) {
  if (!run) {
    g_last_error = "null run";
    return MUTAB_ERR_INVALID_ARGUMENT;
  }
  return guarded([&] { return to_status(run->run.run_eval()); });
}

const char* mutab_run_report_json(mutab_run* run) {
  if (!run) return "";
  return run->run.report_json().c_str();
}

mutab_status mutab_teds(const char* pred_html, const char* gt_html, int structural, double* out) {
  if (!pred_html || !gt_html || !out) {
    g_last_error = "null html or output pointer";
    return MUTAB_ERR_INVALID_ARGUMENT;
  }
  return guarded([&] {
    *out = mutab::teds_from_html(pred_html, gt_html,
                                 structural ? mutab::TedsMode::Structural : mutab::TedsMode::Total);
    return MUTAB_OK;
  });
}

}  // extern "C"
