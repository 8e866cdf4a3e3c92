#ifndef DYNAFLOW_H
#define DYNAFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every call. The usage, missing-artifact and bad-reference codes match
 the command-line exit codes.
 */
typedef enum DfStatus {
  DF_STATUS_OK = 0,
  DF_STATUS_FAILURE = 1,
  DF_STATUS_USAGE = 2,
  DF_STATUS_MISSING_ARTIFACT = 3,
  DF_STATUS_BAD_REFERENCE = 4,
  DF_STATUS_NULL_POINTER = 5,
  DF_STATUS_DOMAIN = 6,
  DF_STATUS_NOT_FOUND = 7,
  DF_STATUS_PANIC = 8,
} DfStatus;

/*
 A loaded checkpoint.
 */
typedef struct DfCheckpoint DfCheckpoint;

/*
 A road graph with optional travel times for one slot.
 */
typedef struct DfGraph DfGraph;

/*
 A generated synthetic city.
 */
typedef struct DfWorld DfWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`) and returns the full message length.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
uintptr_t df_last_error(char *buf, uintptr_t len);

/*
 Library version as a static NUL-terminated string.
 */
const char *df_version(void);

/*
 Seconds needed to cover `length_m` at `speed_kmh`.
 */
double df_travel_time_s(double length_m, double speed_kmh);

/*
 Slippy-map tile containing a point.

 # Safety
 `x` and `y` must be valid for writes.
 */
enum DfStatus df_latlon_to_tile(double lat, double lon, uint8_t zoom, uint32_t *x, uint32_t *y);

/*
 Generates a synthetic city with default settings apart from the arguments.

 # Safety
 `world` must be valid for writes.
 */
enum DfStatus df_world_new(uintptr_t grid_n,
                           uint8_t zoom,
                           uint64_t seed,
                           double asymmetry,
                           struct DfWorld **world);

/*
 # Safety
 `world` must be null or come from [`df_world_new`] and not be used afterwards.
 */
void df_world_free(struct DfWorld *world);

/*
 # Safety
 `world` must be a live handle and `count` valid for writes.
 */
enum DfStatus df_world_segment_count(const struct DfWorld *world, uintptr_t *count);

/*
 # Safety
 `world` must be a live handle and `count` valid for writes.
 */
enum DfStatus df_world_tile_count(const struct DfWorld *world, uintptr_t *count);

/*
 Ground-truth speed of segment `index` at (day, hour), day 0 being Monday.

 # Safety
 `world` must be a live handle and `speed_kmh` valid for writes.
 */
enum DfStatus df_world_speed(const struct DfWorld *world,
                             uintptr_t index,
                             uint8_t day,
                             uint8_t hour,
                             double *speed_kmh);

/*
 # Safety
 `world` must be a live handle and `graph` valid for writes.
 */
enum DfStatus df_graph_from_world(const struct DfWorld *world, struct DfGraph **graph);

/*
 # Safety
 `graph` must be null or come from this library and not be used afterwards.
 */
void df_graph_free(struct DfGraph *graph);

/*
 # Safety
 `graph` must be a live handle; `nodes` and `edges` valid for writes.
 */
enum DfStatus df_graph_size(const struct DfGraph *graph, uintptr_t *nodes, uintptr_t *edges);

/*
 Sets travel times from the world's true speeds at (day, hour).

 # Safety
 Both handles must be live.
 */
enum DfStatus df_graph_use_world_speeds(struct DfGraph *graph,
                                        const struct DfWorld *world,
                                        uint8_t day,
                                        uint8_t hour);

/*
 Sets travel times from `n` (segment id, km/h) pairs; uncovered edges get the mean.

 # Safety
 `graph` must be live; `ids` and `speeds_kmh` must each hold `n` valid entries,
 every id a NUL-terminated UTF-8 string.
 */
enum DfStatus df_graph_set_speeds(struct DfGraph *graph,
                                  const char *const *ids,
                                  const double *speeds_kmh,
                                  uintptr_t n);

/*
 Shortest route by travel time (`by_time` non-zero) or by length. Returns
 `DfStatus::NotFound` when `dst` is unreachable.

 # Safety
 `graph` must be live; `time_s`, `length_m` and `hops` valid for writes.
 */
enum DfStatus df_graph_route(const struct DfGraph *graph,
                             uintptr_t src,
                             uintptr_t dst,
                             bool by_time,
                             double *time_s,
                             double *length_m,
                             uintptr_t *hops);

/*
 Number of nodes reachable from `src` within `budget_s` seconds.

 # Safety
 `graph` must be live and `count` valid for writes.
 */
enum DfStatus df_graph_reachable(const struct DfGraph *graph,
                                 uintptr_t src,
                                 double budget_s,
                                 uintptr_t *count);

/*
 # Safety
 `path` must be a NUL-terminated UTF-8 string and `ckpt` valid for writes.
 */
enum DfStatus df_checkpoint_load(const char *path, struct DfCheckpoint **ckpt);

/*
 # Safety
 `ckpt` must be null or come from [`df_checkpoint_load`] and not be used afterwards.
 */
void df_checkpoint_free(struct DfCheckpoint *ckpt);

/*
 Trainable scalar count of a network checkpoint; zero for an oracle.

 # Safety
 `ckpt` must be live and `count` valid for writes.
 */
enum DfStatus df_checkpoint_param_count(const struct DfCheckpoint *ckpt, uintptr_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNAFLOW_H */
