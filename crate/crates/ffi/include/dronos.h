#ifndef DRONOS_H
#define DRONOS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DronosStatus {
  DRONOS_STATUS_OK = 0,
  DRONOS_STATUS_NULL_POINTER = 1,
  DRONOS_STATUS_INVALID_ARGUMENT = 2,
  DRONOS_STATUS_PARSE = 3,
  DRONOS_STATUS_BUFFER_TOO_SMALL = 4,
  /**
   * Nothing to return (e.g. no decoded frame pending).
   */
  DRONOS_STATUS_EMPTY = 5,
  /**
   * A Rust panic was caught at the boundary. The handle may be unusable.
   */
  DRONOS_STATUS_INTERNAL = 6,
} DronosStatus;

typedef enum DronosVerdict {
  DRONOS_VERDICT_UNCHANGED = 0,
  DRONOS_VERDICT_CLAMPED = 1,
  DRONOS_VERDICT_RETREAT = 2,
} DronosVerdict;

/**
 * Streaming MSP decoder that queues decoded SET_RAW_RC commands.
 */
typedef struct DronosMspDecoder DronosMspDecoder;

typedef struct DronosPath DronosPath;

typedef struct DronosRecorder DronosRecorder;

/**
 * Static zones plus the fence and safety settings they are filtered with.
 */
typedef struct DronosZones DronosZones;

typedef struct DronosVec3 {
  double x;
  double y;
  double z;
} DronosVec3;

typedef struct DronosPathSample {
  struct DronosVec3 position;
  double yaw;
  bool done;
} DronosPathSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The last error message on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *dronos_last_error(void);

/**
 * Library version as a static string.
 */
const char *dronos_version(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void dronos_string_free(char *s);

/**
 * Encodes an MSP_SET_RAW_RC frame. `*written` receives the frame length,
 * or the required capacity when `DRONOS_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `channels` must point to `count` values and `out` to `capacity` writable bytes.
 */
enum DronosStatus dronos_msp_encode_rc(const uint16_t *channels,
                                       size_t count,
                                       uint8_t *out,
                                       size_t capacity,
                                       size_t *written);

struct DronosMspDecoder *dronos_msp_decoder_new(void);

/**
 * # Safety
 * `dec` must come from [`dronos_msp_decoder_new`] and not have been freed.
 */
void dronos_msp_decoder_free(struct DronosMspDecoder *dec);

/**
 * Feeds bytes in any chunking. Decoded SET_RAW_RC commands are queued for
 * [`dronos_msp_decoder_next_rc`]; `*frames` receives how many were queued.
 * Other valid frames are counted as rejected.
 *
 * # Safety
 * `dec` must be a live decoder and `bytes` must point to `len` readable bytes.
 */
enum DronosStatus dronos_msp_decoder_feed(struct DronosMspDecoder *dec,
                                          const uint8_t *bytes,
                                          size_t len,
                                          size_t *frames);

/**
 * Pops the oldest decoded command. Returns `DRONOS_STATUS_EMPTY` when none is pending.
 *
 * # Safety
 * `dec` must be a live decoder; `channels` must have room for `capacity` values.
 */
enum DronosStatus dronos_msp_decoder_next_rc(struct DronosMspDecoder *dec,
                                             uint16_t *channels,
                                             size_t capacity,
                                             size_t *count);

/**
 * Number of contiguous garbage runs skipped while searching for a frame
 * header. Returns 0 for NULL.
 *
 * # Safety
 * `dec` must be NULL or a live decoder.
 */
uint64_t dronos_msp_decoder_resyncs(const struct DronosMspDecoder *dec);

/**
 * Frames with a bad checksum, plus valid frames that were not SET_RAW_RC.
 *
 * # Safety
 * `dec` must be NULL or a live decoder.
 */
uint64_t dronos_msp_decoder_rejected(const struct DronosMspDecoder *dec);

/**
 * Parses a JSON path document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum DronosStatus dronos_path_from_json(const char *json, struct DronosPath **out);

/**
 * # Safety
 * `path` must be NULL or a live path handle.
 */
void dronos_path_free(struct DronosPath *path);

/**
 * Serializes a path back to JSON. Free the result with [`dronos_string_free`].
 * Returns NULL on failure.
 *
 * # Safety
 * `path` must be a live path handle.
 */
char *dronos_path_to_json(const struct DronosPath *path);

/**
 * Total duration in seconds, or NaN for NULL.
 *
 * # Safety
 * `path` must be NULL or a live path handle.
 */
double dronos_path_duration(const struct DronosPath *path);

/**
 * # Safety
 * `path` must be NULL or a live path handle.
 */
size_t dronos_path_waypoint_count(const struct DronosPath *path);

/**
 * Setpoint at time `t` seconds into the path.
 *
 * # Safety
 * `path` must be a live path handle and `out` writable.
 */
enum DronosStatus dronos_path_sample(const struct DronosPath *path,
                                     double t,
                                     struct DronosPathSample *out);

/**
 * A demonstration recorder. `capacity` 0 selects the default raw-trace capacity.
 */
struct DronosRecorder *dronos_recorder_new(size_t capacity);

/**
 * # Safety
 * `rec` must be NULL or a live recorder.
 */
void dronos_recorder_free(struct DronosRecorder *rec);

/**
 * Appends a pose. `*accepted` is false when the sample was dropped (out of
 * order, non-finite, or the trace is full).
 *
 * # Safety
 * `rec` must be a live recorder; `accepted` may be NULL.
 */
enum DronosStatus dronos_recorder_record(struct DronosRecorder *rec,
                                         struct DronosVec3 position,
                                         double t,
                                         bool *accepted);

/**
 * # Safety
 * `rec` must be NULL or a live recorder.
 */
size_t dronos_recorder_len(const struct DronosRecorder *rec);

/**
 * Simplifies the trace (Ramer-Douglas-Peucker with tolerance `epsilon`,
 * meters) into a path flown at `speed` m/s. The recorder stays usable.
 *
 * # Safety
 * `rec` must be a live recorder, `id` a NUL-terminated string, `out` writable.
 */
enum DronosStatus dronos_recorder_finish(const struct DronosRecorder *rec,
                                         const char *id,
                                         double epsilon,
                                         double speed,
                                         struct DronosPath **out);

/**
 * Parses a zone file (JSON array). Only static zones are accepted here;
 * dynamic zones need live tracking. The default geofence and safety settings apply.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum DronosStatus dronos_zones_from_json(const char *json, struct DronosZones **out);

/**
 * # Safety
 * `zones` must be NULL or a live zone set.
 */
void dronos_zones_free(struct DronosZones *zones);

/**
 * # Safety
 * `zones` must be NULL or a live zone set.
 */
size_t dronos_zones_count(const struct DronosZones *zones);

/**
 * Replaces the geofence (default: x, y in [-3, 3], z in [0, 2.5]).
 *
 * # Safety
 * `zones` must be a live zone set.
 */
enum DronosStatus dronos_zones_set_fence(struct DronosZones *zones,
                                         struct DronosVec3 min,
                                         struct DronosVec3 max);

/**
 * Runs the safety filter on a commanded target for a drone at `current`.
 *
 * # Safety
 * `zones` must be a live zone set; `out_target` and `out_verdict` writable.
 */
enum DronosStatus dronos_zones_filter(const struct DronosZones *zones,
                                      struct DronosVec3 target,
                                      struct DronosVec3 current,
                                      struct DronosVec3 *out_target,
                                      enum DronosVerdict *out_verdict);

/**
 * Static check of a path against the fence and zones. `*issues` receives
 * the number of problems; `report` (may be NULL) receives a newline-separated
 * description to free with [`dronos_string_free`], or NULL when clean.
 *
 * # Safety
 * `path` and `zones` must be live handles; `issues` writable.
 */
enum DronosStatus dronos_path_check(const struct DronosPath *path,
                                    const struct DronosZones *zones,
                                    size_t *issues,
                                    char **report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRONOS_H */
