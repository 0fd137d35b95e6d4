#include <math.h>
#include <stdio.h>
#include <string.h>

#include "calmreminder.h"

#define CHECK(cond)                                                           \
  do {                                                                        \
    if (!(cond)) {                                                            \
      fprintf(stderr, "%s:%d: %s (last error: %s)\n", __FILE__, __LINE__,    \
              #cond, cr_last_error());                                        \
      return 1;                                                               \
    }                                                                         \
  } while (0)

static const int64_t T0 = 1740916800000LL;
static const int64_t HOUR = 3600000LL;

int main(void) {
  CrSample samples[60];
  for (int i = 0; i < 60; i++) {
    CrSample s = {T0 + i * 5000, 0.5, -0.5, 0.5};
    samples[i] = s;
  }
  double energy = 0;
  uint32_t count = 0;
  CHECK(cr_compute_energy(T0, samples, 60, &energy, &count) == CR_STATUS_OK);
  CHECK(count == 60 && fabs(energy - 0.5) < 1e-12);
  CHECK(cr_compute_energy(T0 + 1, samples, 60, &energy, &count) == CR_STATUS_INVALID_ARGUMENT);
  CHECK(strstr(cr_last_error(), "aligned") != NULL);
  CHECK(cr_compute_energy(T0, NULL, 0, &energy, &count) == CR_STATUS_OK);
  CHECK(count == 0 && isnan(energy));

  double x[] = {0.0, 0.1, 0.2, 0.3};
  double y[] = {1.0, 2.0, 3.0, 4.0};
  CrModel *model = NULL;
  CHECK(cr_model_fit(x, y, 4, &model) == CR_STATUS_OK);
  double slope = 0, intercept = 0, rating = 0;
  CHECK(cr_model_params(model, &slope, &intercept) == CR_STATUS_OK);
  CHECK(fabs(slope - 10.0) < 1e-9 && fabs(intercept - 1.0) < 1e-9);
  CHECK(cr_model_predict(model, 0.15, 12, 6, &rating) == CR_STATUS_OK);
  CHECK(fabs(rating - 2.5) < 1e-9);
  CHECK(cr_model_predict(model, 0.15, 2, 6, &rating) == CR_STATUS_INSUFFICIENT_COVERAGE);
  cr_model_free(model);
  CHECK(cr_model_fit(x, y, 1, &model) == CR_STATUS_NO_FIT);

  CrService *svc = NULL;
  CHECK(cr_service_open(NULL, T0, 42, &svc) == CR_STATUS_OK);
  uint32_t pid = 0;
  CHECK(cr_service_register(svc, "c-family", 0, &pid) == CR_STATUS_OK);
  CHECK(pid == 1);
  CHECK(cr_service_register(svc, "c-family", 0, &pid) == CR_STATUS_CONFLICT);
  uint8_t dup = 9;
  CHECK(cr_service_ingest(svc, pid, T0 - 300000, 0.25, 60, &dup) == CR_STATUS_OK && dup == 0);
  CHECK(cr_service_ingest(svc, pid, T0 - 300000, 0.25, 60, &dup) == CR_STATUS_OK && dup == 1);
  CHECK(cr_service_ingest(svc, pid, T0 - 300000, 0.75, 60, &dup) == CR_STATUS_CONFLICT);
  CHECK(cr_service_ingest(svc, pid, T0 - 600000, NAN, 0, NULL) == CR_STATUS_OK);
  CHECK(cr_service_ingest(svc, 99, T0 - 300000, 0.25, 60, NULL) == CR_STATUS_NOT_FOUND);
  CHECK(cr_service_ingest(svc, pid, T0, 0.25, 60, NULL) == CR_STATUS_INVALID_ARGUMENT);

  char *pending = NULL;
  int64_t now = T0;
  for (int step = 0; step < 72; step++) {
    now += HOUR;
    CrTickReport tick;
    CHECK(cr_service_set_time(svc, now, &tick) == CR_STATUS_OK);
    CHECK(cr_service_pending_json(svc, pid, &pending) == CR_STATUS_OK);
    if (strcmp(pending, "[]") != 0) break;
    cr_string_free(pending);
    pending = NULL;
  }
  CHECK(pending != NULL);
  const char *id_at = strstr(pending, "\"id\":\"");
  CHECK(id_at != NULL);
  id_at += 6;
  const char *id_end = strchr(id_at, '"');
  char event_id[128] = {0};
  CHECK(id_end != NULL && (size_t)(id_end - id_at) < sizeof event_id);
  memcpy(event_id, id_at, (size_t)(id_end - id_at));

  char body[512];
  if (strstr(event_id, "-end_of_day-")) {
    snprintf(body, sizeof body, "{\"event_id\":\"%s\",\"items\":{\"medication\":true,\"communication\":4}}", event_id);
  } else {
    CHECK(strstr(event_id, "-intraday-") != NULL);
    snprintf(body, sizeof body, "{\"event_id\":\"%s\",\"items\":{\"activity\":2}}", event_id);
  }
  cr_string_free(pending);

  char *result = NULL;
  CHECK(cr_service_respond_json(svc, "{not json", &result) == CR_STATUS_BAD_ENCODING);
  CHECK(cr_service_respond_json(svc, body, &result) == CR_STATUS_OK);
  CHECK(strstr(result, "\"answered\"") != NULL);
  cr_string_free(result);
  CHECK(cr_service_respond_json(svc, body, NULL) == CR_STATUS_CONFLICT);
  CHECK(cr_service_set_time(svc, T0, NULL) == CR_STATUS_INVALID_ARGUMENT);

  char *metrics = NULL;
  CHECK(cr_service_metrics_json(svc, 0, &metrics) == CR_STATUS_OK);
  CHECK(strstr(metrics, "\"conditions\"") != NULL);
  cr_string_free(metrics);
  cr_service_free(svc);

  puts("ok");
  return 0;
}
