"""compo_bench - MoC vs dense global attention benchmark for compo

For every grid point (N, L, k, sigma, D, H) one local block, the routing
step and one global attention layer are timed on identical random inputs.
The dense baseline shares the local block and has no routing; only its
global layer differs (every z token attends to all N * L z tokens).

Analytic accounting, per global attention layer (scores + weighted sum,
2 FLOPs per multiply-add):

    dense = 2 * (N L)^2 * D * 2
    moc   = 2 * N (L + N_p + 1) * L_global * D * 2      attention
          + 2 * N * D * D * 2                           router projections
          + 2 * N * N * D                               router scores

with L_global = L + k L + (N - k - 1) ceil(L / sigma).


Requirements
------------
csv, json : report files.
time : perf_counter timings.
os : default worker count.
numpy : inputs and statistics.
compo_globals : debugger.
compo_numerics : tensors and parameters.
compo_tokens, compo_local, compo_router, compo_moc : the timed layers.
compo_errors : ConfigError, NumericsError.

Classes
-------
BenchReport : rows plus CSV / JSON / gnuplot writers.

Functions
---------
flop_estimate(N, L, k, sigma, D, H) : (moc_flops, dense_flops).
bench_attention(grid, repeats, warmup) : BenchReport.
default_grid() / read_grid(path) : grid points.
"""

import csv
import json
import os
import time
import numpy as np
import compo_numerics as cn
import compo_tokens
import compo_local
import compo_router
import compo_moc
from compo_globals import debugger
from compo_errors import ConfigError, NumericsError

FIELDS = ('method', 'mode', 'N', 'L', 'k', 'sigma', 'D', 'H', 'kv_length',
          'flops_global_block', 'wall_ms_local', 'wall_ms_routing',
          'wall_ms_global', 'wall_ms_total', 'repeats', 'dispersion',
          'warning')


def flop_estimate(N, L, k, sigma, D, H):
    n_p = compo_tokens.compressed_count(L, sigma)
    length = compo_moc.context_length(N, L, k, sigma)
    dense = 2 * (N * L) ** 2 * D * 2
    moc = 2 * N * (L + n_p + 1) * length * D * 2
    moc += 2 * N * D * D * 2 + 2 * N * N * D
    return moc, dense


def default_grid(L=256, sigma=8, D=64, H=4, k_fraction=0.25):
    return [(N, L, compo_router.default_k(N, k_fraction), sigma, D, H)
            for N in (4, 8, 16, 32)]


def read_grid(path):
    """One grid point per line: N L k sigma D H (commas or blanks, '#'
    starts a comment)."""
    grid = []
    with open(path, encoding="utf-8") as grid_file:
        for number, line in enumerate(grid_file, 1):
            line = line.split('#', 1)[0].replace(',', ' ').strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 6:
                raise ConfigError("{}:{}: expected N L k sigma D H".format(
                    path, number))
            grid.append(tuple(int(f) for f in fields))
    return grid


def time_call(fn, repeats, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1000.0)
    return np.array(times)


def iqr(times):
    return float(np.percentile(times, 75) - np.percentile(times, 25))


def _resolution_warning(times):
    resolution_ms = time.get_clock_info('perf_counter').resolution * 1000.0
    return bool(resolution_ms > 0.01 * float(np.min(times)))


class BenchSetup(object):
    """Random parameters and inputs for one grid point."""

    def __init__(self, N, L, k, sigma, D, H, seed=0):
        if D % H:
            raise ConfigError("D {} not divisible by H {}".format(D, H))
        self.N, self.L, self.k, self.sigma, self.D, self.H = \
            N, L, k, sigma, D, H
        rng = np.random.default_rng([seed, N, L, k, sigma, D, H])
        store = cn.ParamStore()
        compo_local.init_block(store.scope('local'), D, rng)
        compo_moc.init_global_block(store.scope('global'), D, rng)
        for name, tensor in store.items():
            if not np.any(tensor.value):
                tensor.value[...] = rng.normal(0.0, 0.02, tensor.shape)
        self.local = store.scope('local')
        self.glob = store.scope('global')
        n_p = compo_tokens.compressed_count(L, sigma)
        segments = compo_tokens.Segments(L, n_p)
        self.x = compo_tokens.PackedTokens(
            cn.Tensor(rng.standard_normal((N, segments.total, D))), segments)
        self.mod = cn.Tensor(rng.standard_normal((1, D)))

    def scores(self):
        anchors = self.x.tokens[:, self.x.segments.anchor.start, :]
        return compo_router.importance_scores(anchors,
                                              self.glob.scope('router'),
                                              self.H)

    def route(self):
        O = self.scores()
        if self.k == 0:
            routing = compo_router.RoutingDecision(
                np.zeros((self.H, self.N, 0), dtype=np.int64), 0, 'none')
        else:
            routing = compo_router.route_deterministic(O, self.k)
        return O, routing


class BenchReport(object):
    def __init__(self, rows=None):
        self.rows = rows if rows is not None else []

    def rows_for(self, method, mode='serial'):
        return [row for row in self.rows
                if row['method'] == method and row['mode'] == mode]

    def ratios(self, key='wall_ms_global', mode='serial'):
        """[(N, moc / dense)] for matching grid points, ordered by N."""
        dense = {(r['N'], r['L'], r['D'], r['H']): r[key]
                 for r in self.rows_for('dense', mode)}
        ratios = []
        for row in self.rows_for('moc', mode):
            base = dense.get((row['N'], row['L'], row['D'], row['H']))
            if base:
                ratios.append((row['N'], row[key] / base))
        return sorted(ratios)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as csv_file:
            writer = csv.DictWriter(csv_file, fieldnames=FIELDS)
            writer.writeheader()
            writer.writerows(self.rows)

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as json_file:
            json.dump(self.rows, json_file, indent=2)

    def write_dat(self, path):
        """gnuplot: N, global ratio, total ratio"""
        totals = dict(self.ratios('wall_ms_total'))
        with open(path, "w", encoding="utf-8") as dat_file:
            dat_file.write("# N moc/dense_global moc/dense_total\n")
            for N, ratio in self.ratios('wall_ms_global'):
                dat_file.write("{} {:.6f} {:.6f}\n".format(
                    N, ratio, totals.get(N, float('nan'))))

    def write(self, csv_path):
        stem = csv_path[:-4] if csv_path.endswith('.csv') else csv_path
        self.write_csv(stem + '.csv')
        self.write_json(stem + '.json')
        self.write_dat(stem + '.dat')
        debugger.message("BNCH", "Wrote {}.csv / .json / .dat".format(stem))


def _bench_point(setup, repeats, warmup, chunk, workers, mode):
    N, L, k, sigma, D, H = setup.N, setup.L, setup.k, setup.sigma, \
        setup.D, setup.H
    O, routing = setup.route()
    positions, _ = compo_moc.context_index(setup.x.segments,
                                           routing.broadcast_heads(H))
    expected = compo_moc.context_length(N, L, k, sigma)
    if positions.shape[-1] != expected:
        raise NumericsError("measured KV length {} != analytic {}".format(
            positions.shape[-1], expected))
    moc_flops, dense_flops = flop_estimate(N, L, k, sigma, D, H)

    local = time_call(lambda: compo_local.local_block_forward(
        setup.x, setup.mod, setup.local, H), repeats, warmup)
    routing_times = time_call(setup.route, repeats, warmup)
    moc = time_call(lambda: compo_moc.moc_attention_forward(
        setup.x, O, routing, setup.glob, H, chunk=chunk, workers=workers),
        repeats, warmup)
    dense = time_call(lambda: compo_moc.dense_global_attention(
        setup.x, setup.glob, H, chunk=chunk, workers=workers),
        repeats, warmup)

    local_ms = float(np.median(local))
    common = {'mode': mode, 'N': N, 'L': L, 'k': k, 'sigma': sigma, 'D': D,
              'H': H, 'wall_ms_local': local_ms, 'repeats': repeats}
    moc_row = dict(common, method='moc', kv_length=expected,
                   flops_global_block=moc_flops,
                   wall_ms_routing=float(np.median(routing_times)),
                   wall_ms_global=float(np.median(moc)),
                   dispersion=iqr(moc),
                   warning=_resolution_warning(moc))
    moc_row['wall_ms_total'] = local_ms + moc_row['wall_ms_routing'] + \
        moc_row['wall_ms_global']
    dense_row = dict(common, method='dense', kv_length=N * L,
                     flops_global_block=dense_flops, wall_ms_routing=0.0,
                     wall_ms_global=float(np.median(dense)),
                     dispersion=iqr(dense),
                     warning=_resolution_warning(dense))
    dense_row['wall_ms_total'] = local_ms + dense_row['wall_ms_global']
    return [moc_row, dense_row]


def bench_attention(grid, repeats=9, warmup=2, **kwargs):
    """Times every grid point serially, then again over a thread pool when
    parallel is set."""
    if repeats < 5 or warmup < 2:
        raise ConfigError("bench needs repeats >= 5 and warmup >= 2")
    chunk = kwargs.get('chunk', 4)
    parallel = kwargs.get('parallel', False)
    workers = kwargs.get('workers') or os.cpu_count() or 1
    seed = kwargs.get('seed', 0)
    modes = [('serial', 1)] + ([('parallel', workers)] if parallel else [])
    report = BenchReport()
    for point in grid:
        setup = BenchSetup(*point, seed=seed)
        for mode, count in modes:
            debugger.message("BNCH", "N={} L={} k={} sigma={} D={} H={} ({})".
                             format(*(tuple(point) + (mode,))))
            rows = _bench_point(setup, repeats, warmup, chunk, count, mode)
            report.rows.extend(rows)
            debugger.message("BNCH", "global ms moc {:.2f} dense {:.2f}".
                             format(rows[0]['wall_ms_global'],
                                    rows[1]['wall_ms_global']))
            for row in rows:
                if row['warning']:
                    debugger.message("WARN", "{} timings near the clock "
                                     "resolution".format(row['method']))
    return report
