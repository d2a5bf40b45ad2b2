'''
Command-line pipeline: preprocess -> detect -> blocks -> fit -> risk ->
validate, plus the synthetic corridor generator.

Every stage reads its inputs from the paths of one JSON configuration, writes
its outputs next to a <output>.manifest.json (input hashes, config hash, seed,
wall time) and prints a short summary on stdout. Logs go to stderr.
'''

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from .BlockExtractor import INDICATORS, BlockExtractor, exposure_by_group, load_site_map, read_blocks, \
    standardize_covariates, write_blocks, write_report
from .HierarchicalGev import HBSFP, HBSGRP, FitMetrics, compare_models, fit_metrics, \
    read_chain_csv, run_mcmc, summary, write_chain_csv, write_summary_json
from .NearMissDetector import VI, VV, NearMissDetector, read_boundaries, read_events, write_events
from .RiskEstimator import RiskEstimator, write_cor, write_sweep
from .config import SYNTHETIC, PipelineConfig, load_config
from .errors import ConfigError, DataError, NearMissError, exit_code_for
from .kinematics import ProcessedTrack, TrackProcessor, read_processed, read_tracks, read_vehicle_table, \
    write_processed
from .logger import Logger
from .synth import coefficients_dict, match_ground_truth, synthesize_corpus, synthesize_records, \
    write_corpus
from .utils import hash_tree, provenance, read_csv, stage_entropy, write_csv

logger = Logger("nearmiss.cli")

COMMANDS = ('preprocess', 'detect', 'blocks', 'fit', 'risk', 'validate', 'synth')


class MissingUpstreamError(DataError):
    ''' Signifies a stage whose inputs have not been produced yet; names the stage to run. '''


#####################################
# HELPERS                           #
#####################################


def _require(cfg: PipelineConfig, name: str) -> str:
    value = getattr(cfg.paths, name)
    if value is None:
        raise ConfigError(f"paths.{name} is not set in {cfg.source or 'the configuration'}")
    return value


def _upstream(path: str, stage: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingUpstreamError(f"{path} does not exist; run `nearmiss {stage}` first")
    return path


def _comment(cfg: PipelineConfig) -> str:
    return provenance(cfg.seed, cfg.digest)


def _manifest(cfg: PipelineConfig, stage: str, output, inputs: List, started: float,
              extra: Optional[dict] = None) -> None:
    '''
    Write <output>.manifest.json with the hashes of every existing input.
    '''

    output = Path(output)
    document = {
        'stage': stage,
        'seed': cfg.seed,
        'config': cfg.digest,
        'inputs': {str(p): hash_tree(p) for p in inputs if p is not None and Path(p).exists()},
        'output': str(output),
        'wall_time': round(time.time() - started, 3),
    }
    if extra:
        document.update(extra)
    path = output.parent / f"{output.name}.manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as fh:
        json.dump(document, fh, indent=2, sort_keys=True, default=float)
        fh.write('\n')
    logger.info("stage complete", {"stage": stage, "output": str(output), "manifest": str(path)})


def _scenario_files(path: Path) -> List[Path]:
    if path.is_file():
        return [path]
    return sorted(path.glob('*.csv'))


def _load_processed(cfg: PipelineConfig) -> Dict[str, List[ProcessedTrack]]:
    processed = _upstream(_require(cfg, 'processed'), 'preprocess')
    vehicles = read_vehicle_table(cfg.paths.vehicles)
    return {f.stem: read_processed(f, vehicles) for f in _scenario_files(processed)}


def _fit_files(cfg: PipelineConfig, variant: str):
    fit_dir = Path(_require(cfg, 'fit'))
    stem = f"{cfg.model.kind}_{variant}"
    return fit_dir / f"{stem}_chains.csv", fit_dir / f"{stem}_summary.json"


def _blocks_path(cfg: PipelineConfig) -> Path:
    if cfg.model.source == SYNTHETIC:
        return _upstream(_require(cfg, 'synthetic_blocks'), 'synth')
    return _upstream(_require(cfg, 'blocks'), 'blocks')


def _exposure_path(blocks: Path) -> Path:
    return blocks.with_name(f"{blocks.stem}.exposure.json")


def _load_fit(cfg: PipelineConfig):
    ''' Blocks of the configured kind, the posterior chain and the fitted groups. '''

    blocks = _blocks_path(cfg)
    records = read_blocks(blocks, cfg.model.kind)
    chains_path, summary_path = _fit_files(cfg, cfg.model.spec.variant)
    _upstream(str(summary_path), 'fit')
    with open(summary_path, 'r') as fh:
        document = json.load(fh)
    chain = read_chain_csv(_upstream(str(chains_path), 'fit'), int(document.get('seed', 0)))
    spec = replace(cfg.model.spec, groups=tuple(document.get('groups', ())))
    return blocks, records, chain, spec, [chains_path, summary_path]


def _print_table(frame: pd.DataFrame) -> None:
    print(frame.to_string(index=False))


#####################################
# COMMANDS                          #
#####################################


def cmd_preprocess(cfg: PipelineConfig) -> int:
    '''
    Smooth and differentiate every trajectory file: one processed CSV per
    scenario, named after the input file.
    '''

    started = time.time()
    source = Path(_require(cfg, 'tracks'))
    if not source.exists():
        raise MissingUpstreamError(f"{source} does not exist; run `nearmiss synth` or add trajectory CSVs")
    out_dir = Path(_require(cfg, 'processed'))
    out_dir.mkdir(parents=True, exist_ok=True)

    files = _scenario_files(source)
    if not files:
        logger.warn("no trajectory files found", {"path": str(source)})

    vehicles = read_vehicle_table(cfg.paths.vehicles)
    processor = TrackProcessor(cfg.kinematics)
    print("scenario tracks processed skipped")
    for path in files:
        tracks = read_tracks(path)
        processed = processor.process_all(tracks, vehicles)
        write_processed(out_dir / f"{path.stem}.csv", processed, _comment(cfg))
        print(f"{path.stem} {len(tracks)} {len(processed)} {len(tracks) - len(processed)}")

    _manifest(cfg, 'preprocess', out_dir, [source, cfg.paths.vehicles], started, {'scenarios': len(files)})
    return 0


def cmd_detect(cfg: PipelineConfig) -> int:
    ''' Scan every processed scenario for V-V and V-I near misses. '''

    started = time.time()
    scenarios = _load_processed(cfg)
    boundaries = []
    if cfg.paths.boundaries is not None:
        boundaries = read_boundaries(_upstream(cfg.paths.boundaries, 'synth'))

    detector = NearMissDetector(cfg.detection, boundaries, cfg.jobs)
    events = detector.scan_all(scenarios)
    output = _require(cfg, 'events')
    write_events(output, events, _comment(cfg))

    vv = sum(e.kind == VV for e in events)
    print(f"scenarios {len(scenarios)} events {len(events)} VV {vv} VI {len(events) - vv}")
    _manifest(cfg, 'detect', output, [cfg.paths.processed, cfg.paths.boundaries], started)
    return 0


def cmd_blocks(cfg: PipelineConfig) -> int:
    '''
    Group events by site, extract block maxima, standardize covariates per
    interaction kind and record the exposure time of every group.
    '''

    started = time.time()
    events = read_events(_upstream(_require(cfg, 'events'), 'detect'))
    site_map = load_site_map(_upstream(_require(cfg, 'site_map'), 'synth'))
    extractor = BlockExtractor(site_map, cfg.blocks)
    records = extractor.extract(events)

    output = Path(_require(cfg, 'blocks'))
    output.parent.mkdir(parents=True, exist_ok=True)
    standardized = []
    for kind in (VV, VI):
        subset = [r for r in records if r.kind == kind]
        if len(subset) < 2:
            if subset:
                logger.warn("too few blocks to standardize", {"kind": kind, "blocks": len(subset)})
            standardized.extend(subset)
            continue
        scaled, report = standardize_covariates(subset, INDICATORS)
        write_report(output.with_name(f"{output.stem}.{kind}.standardization.json"), report)
        standardized.extend(scaled)
    write_blocks(output, standardized, _comment(cfg))

    exposure = exposure_by_group(_load_processed(cfg), site_map)
    with open(_exposure_path(output), 'w') as fh:
        json.dump(exposure, fh, indent=2, sort_keys=True)
        fh.write('\n')

    counts = pd.DataFrame([{'kind': r.kind, 'group_id': r.group_id} for r in standardized],
                          columns=['kind', 'group_id'])
    print(f"events {len(events)} dropped {extractor.dropped} blocks {len(standardized)}")
    if len(counts):
        _print_table(counts.groupby(['kind', 'group_id']).size().reset_index(name='blocks'))
    _manifest(cfg, 'blocks', output, [cfg.paths.events, cfg.paths.site_map, cfg.paths.processed], started)
    return 0


def cmd_fit(cfg: PipelineConfig) -> int:
    '''
    Sample the posterior of the configured model on the blocks of one
    interaction kind; writes chains, a summary JSON and, once both variants
    are fitted, a DIC/WAIC/LOOIC comparison.
    '''

    started = time.time()
    blocks = _blocks_path(cfg)
    records = read_blocks(blocks, cfg.model.kind)
    if not records:
        raise DataError(f"{blocks} holds no {cfg.model.kind} blocks")

    spec = cfg.model.spec
    chain = run_mcmc(records, spec, cfg.priors, cfg.mcmc, stage_entropy(cfg.seed, 'fit'), cfg.jobs)
    metrics = fit_metrics(chain, records, spec, cfg.priors)

    groups = spec.groups or tuple(sorted({r.group_id for r in records}))
    chains_path, summary_path = _fit_files(cfg, spec.variant)
    write_chain_csv(chains_path, chain, _comment(cfg))
    write_summary_json(summary_path, chain, spec, metrics, groups)

    table = summary(chain)
    _print_table(table)
    print(' '.join(f"{k} {v:.3f}" for k, v in metrics.to_dict().items()))
    bad = table[table['bgr'] > 1.1]
    if len(bad):
        logger.warn("chains have not converged", {"parameters": list(bad['parameter'])})

    results = {}
    for variant in (HBSFP, HBSGRP):
        path = _fit_files(cfg, variant)[1]
        if path.exists():
            with open(path, 'r') as fh:
                m = json.load(fh).get('metrics') or {}
            if m:
                results[variant] = FitMetrics(m['DIC'], m['pD'], m['WAIC'], m['p_WAIC'], m['LOOIC'], m['p_LOO'])
    if len(results) == 2:
        comparison = compare_models(results)
        write_csv(chains_path.with_name(f"{cfg.model.kind}_comparison.csv"), comparison, _comment(cfg))
        _print_table(comparison)

    _manifest(cfg, 'fit', summary_path, [blocks], started)
    return 0


def cmd_risk(cfg: PipelineConfig) -> int:
    ''' Block exceedance probabilities, group COR and the corridor crash frequency. '''

    started = time.time()
    blocks, records, chain, spec, fit_inputs = _load_fit(cfg)

    exposure = None
    exposure_path = _exposure_path(blocks)
    if cfg.risk.exposure is None and exposure_path.exists():
        with open(exposure_path, 'r') as fh:
            exposure = json.load(fh)

    estimator = RiskEstimator(cfg.risk, exposure)
    result = estimator.estimate(records, chain, spec, cfg.priors)
    out_dir = Path(_require(cfg, 'risk'))
    write_cor(out_dir, result, _comment(cfg))

    _print_table(result.groups)
    band = '' if result.total_band is None else ' [{:.6g}, {:.6g}, {:.6g}]'.format(*result.total_band)
    print(f"CF_total {result.total:.6g}{band}")
    _manifest(cfg, 'risk', out_dir, [blocks, exposure_path] + fit_inputs, started,
              {'cf_total': result.total, 'mode': result.mode, 'omega': result.omega})
    return 0


def cmd_validate(cfg: PipelineConfig) -> int:
    '''
    ROC-AUC of the fitted exceedance probabilities across the omega grid and,
    when a ground-truth file exists, the detector's recovery of scripted
    conflicts.
    '''

    started = time.time()
    blocks, records, chain, spec, fit_inputs = _load_fit(cfg)
    estimator = RiskEstimator(replace(cfg.risk, omega_grid=cfg.validate.omega_grid))
    sweep = estimator.sweep(records, chain, spec, cfg.priors)
    output = Path(_require(cfg, 'validate'))
    write_sweep(output, sweep, _comment(cfg))
    _print_table(sweep)

    inputs = [blocks] + fit_inputs
    truth_path = cfg.paths.truth
    if truth_path is not None and Path(truth_path).exists() and cfg.paths.events is not None \
            and Path(cfg.paths.events).exists():
        truth = read_csv(truth_path, dtype={'scenario_id': str, 'ego': str, 'other': str})
        matched = match_ground_truth(truth, read_events(cfg.paths.events), cfg.validate.recovery_tolerance)
        write_csv(output.with_name('recovery.csv'), matched, _comment(cfg))
        rate = float(matched['recovered'].mean()) if len(matched) else float('nan')
        print(f"ground truth {len(matched)} recovered {int(matched['recovered'].sum())} rate {rate:.3f}")
        inputs += [truth_path, cfg.paths.events]

    _manifest(cfg, 'validate', output, inputs, started)
    return 0


def cmd_synth(cfg: PipelineConfig) -> int:
    '''
    Generate the synthetic corridor: scripted trajectories with ground truth,
    boundaries and site map, plus known-truth block maxima.
    '''

    started = time.time()
    seed = stage_entropy(cfg.seed, 'synth')
    corpus = synthesize_corpus(cfg.synth, seed, cfg.detection)
    written = write_corpus(corpus, _require(cfg, 'tracks'), _require(cfg, 'vehicles'),
                           _require(cfg, 'boundaries'), _require(cfg, 'site_map'),
                           _require(cfg, 'truth'), _comment(cfg))

    if cfg.paths.synthetic_blocks is not None:
        records, coeffs = synthesize_records(cfg.synth, seed)
        blocks = Path(cfg.paths.synthetic_blocks)
        write_blocks(blocks, records, _comment(cfg))
        with open(blocks.with_name(f"{blocks.stem}.truth.json"), 'w') as fh:
            json.dump(coefficients_dict(coeffs), fh, indent=2, sort_keys=True)
            fh.write('\n')
        written.append(str(blocks))

    print(f"scenarios {len(corpus.scenarios)} ground truth {len(corpus.truth)} files {len(written)}")
    _manifest(cfg, 'synth', _require(cfg, 'truth'), [], started, {'outputs': len(written)})
    return 0


HANDLERS = {
    'preprocess': cmd_preprocess,
    'detect': cmd_detect,
    'blocks': cmd_blocks,
    'fit': cmd_fit,
    'risk': cmd_risk,
    'validate': cmd_validate,
    'synth': cmd_synth,
}


#####################################
# ENTRY POINT                       #
#####################################


EPILOG = '''
configuration sections (JSON, all optional, defaults in parentheses):
  seed (0), jobs (1)
  paths       tracks, vehicles, boundaries, site_map, processed, events, blocks,
              fit, risk, validate, truth, synthetic_blocks (relative to the file)
  kinematics  control_point_spacing (5), sg_window (109), sg_order (2),
              min_speed (0.1), min_travel (1.0)
  detection   epsilon (0.30), vv_rule (AND), vv_gate (50), vi_gate (15),
              densify_spacing (0.25), dt (0.1), steps (30)
  blocks      block_duration (11.0; 0 = one block per interaction),
              min_blocks_per_group (30)
  model       kind (VV), source (detected), variant (HBSGRP), mu_fixed,
              sigma_fixed, xi_fixed, mu_random (["intercept"]), sigma_random
  priors      coef_mean (0), coef_sd (10), tau2_shape (0.01), tau2_rate (0.01),
              xi_lower (-1), xi_upper (0.5)
  mcmc        chains (2), iterations (50000), burn_in (20000), thin (1),
              adapt_interval (100), accept_low (0.2), accept_high (0.4),
              initial_scale (0.1)
  risk        omega (-0.5), exposure (per-group observed time), mode (plugin),
              max_draws (2000)
  validate    omega_grid (-0.9 .. -0.1), recovery_tolerance (0.1)
  synth       see nearmiss.synth.SyntheticCorridorSpec

exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error
'''


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='pipeline configuration JSON')
    common.add_argument('--seed', type=int, default=None, help='override the configured seed')
    common.add_argument('--jobs', type=int, default=None, help='cap on worker processes')

    parser = argparse.ArgumentParser(
        prog='nearmiss', description='Near-miss detection and crash-risk estimation pipeline.',
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    commands = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        commands.add_parser(name, parents=[common], help=HANDLERS[name].__doc__.strip().splitlines()[0],
                            epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.jobs)
        return HANDLERS[args.command](cfg)
    except NearMissError as error:
        code = exit_code_for(error)
        logger.error("stage failed", {"command": args.command, "error": type(error).__name__,
                                      "detail": [str(a) for a in error.args], "exit_code": code})
        print(f"nearmiss {args.command}: {error.args[0] if error.args else type(error).__name__}",
              file=sys.stderr)
        return code


if __name__ == '__main__':
    sys.exit(main())
