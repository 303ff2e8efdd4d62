"""compo - compositional scene generation with mixture-of-components attention

Command line entry point.  Each subcommand works inside one run directory
(--out, default runs/default) holding the effective compo.cfg, the
checkpoint (model.manifest + model.bin), metrics.log and any reports.

    compo gen-data   write train.cmpd / heldout.cmpd
    compo train      fit the flow model, save the checkpoint
    compo sample     draw scenes from the checkpoint into samples.cmpd
    compo eval       CD / F-score / self-IoU against held-out scenes
    compo ablate     train and evaluate ablation configs A..G
    compo bench      time MoC against dense global attention

Exit status is 0 on success, 1 for usage errors (bad flags, unknown config
keys, a seed outside [0, 2**32)) and 2 for runtime errors.

The COMPO_THREADS environment variable sets the BLAS / OpenMP thread count.


Requirements
------------
compo_globals : Program-wide global variable module for compo
compo_train, compo_synth, compo_model, compo_bench : the subcommands.
compo_pygame : scene previews, imported only when rendering is enabled.
argparse : command line parsing.
atexit : Trap exit conditions to handle program termination gracefully.

Functions
---------
compo_init(argv) : Parse the command line and load the configuration.
compo_run(args) : Run one subcommand.
compo_terminate() : Gracefully terminate the program.
main(argv) : init + run, returns the exit status.
"""

import os

# Thread counts must be in the environment before numpy loads its BLAS
if os.environ.get("COMPO_THREADS"):
    for _variable in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                      "MKL_NUM_THREADS"):
        os.environ[_variable] = os.environ["COMPO_THREADS"]

import argparse
import atexit
import sys
import compo_globals
import compo_synth
import compo_bench
import compo_train
from compo_globals import debugger, config
from compo_model import ModelConfig, CompoModel, save_checkpoint, \
    load_checkpoint, load_parameters
from compo_errors import CompoError, ConfigError, UsageError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

CHECKPOINT_NAME = "model"
CONFIG_NAME = "compo.cfg"
METRICS_NAME = "metrics.log"
TRAIN_DATA = "train.cmpd"
HELDOUT_DATA = "heldout.cmpd"
SAMPLES_DATA = "samples.cmpd"

# Scene seeds: seed * SEED_STRIDE + n, held-out scenes start at
# HELDOUT_OFFSET so the two splits never share a scene
SEED_STRIDE = 1000000
HELDOUT_OFFSET = 500000
# Run seeds are unsigned 32-bit; scene seeds then fit the u8 record field
SEED_LIMIT = 2 ** 32

_terminate_registered = False


class CompoArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = CompoArgumentParser(add_help=False)
    common.add_argument("--config", help="config file read over compo.cfg")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--out", help="run directory")
    common.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("--render", action="store_true",
                        help="write PNG scene previews")

    parser = CompoArgumentParser(
        prog="compo",
        description="Mixture-of-components flow model for compositional "
                    "scenes.")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True

    subparsers.add_parser("gen-data", parents=[common],
                          help="write the train / held-out datasets")

    train = subparsers.add_parser("train", parents=[common],
                                  help="train the flow model")
    train.add_argument("--steps", type=int, help="training steps")

    for name, text in (("sample", "draw scenes from a checkpoint"),
                       ("eval", "score generated scenes")):
        sub = subparsers.add_parser(name, parents=[common], help=text)
        sub.add_argument("--steps", type=int, help="Euler steps")
        sub.add_argument("--cfg-scale", type=float, dest="cfg_scale",
                         help="classifier-free guidance scale")
        sub.add_argument("--count", type=int, help="number of scenes")
        sub.add_argument("--components", type=int,
                         help="components per generated scene")
        if name == "eval":
            sub.add_argument("--source", choices=compo_train.SOURCES,
                             default="model", help="what to score")

    ablate = subparsers.add_parser("ablate", parents=[common],
                                   help="run ablation configs A..G")
    ablate.add_argument("--labels", help="comma separated labels")
    ablate.add_argument("--steps", type=int, help="training steps per label")

    bench = subparsers.add_parser("bench", parents=[common],
                                  help="time MoC vs dense attention")
    bench.add_argument("--grid", help="grid file: N L k sigma D H per line")
    bench.add_argument("--repeats", type=int, help="timed repeats")
    bench.add_argument("--parallel", action="store_true",
                       help="also time the thread-pool mode")
    bench.add_argument("--report", help="report path (.csv)")
    return parser


def compo_terminate():
    """Gracefully terminate the program.

    This should try to handle any final cleanup and close any open resources
    before exiting the program entirely
    """
    debugger.message("INFO", "Beginning program termination")

    debugger.close_metrics()

    if compo_globals.renderer:
        from compo_pygame import pygame_terminate
        pygame_terminate()
        compo_globals.renderer = None

    # Show a debugger summary
    debugger.summary()

    debugger.message("INFO", "Completed program termination")


def compo_init(argv=None):
    # Register the compo_terminate() function to run any time the program
    # terminates for any reason, using the atexit library.
    global _terminate_registered
    if not _terminate_registered:
        atexit.register(compo_terminate)
        _terminate_registered = True

    args = build_parser().parse_args(argv)

    # defaults, then ./compo.cfg, then --config, then --set, then flags
    compo_globals.config_defaults()
    compo_globals.config_file_load(CONFIG_NAME)
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError("no config file at {}".format(args.config))
        compo_globals.config_file_load(args.config)
    for assignment in args.set:
        try:
            compo_globals.config_override(assignment)
        except ConfigError as e:
            raise UsageError(str(e))
    if args.seed is not None:
        config['compo']['seed'] = str(args.seed)
    if args.out:
        config['compo']['out'] = args.out
    if args.render:
        config['render']['enabled'] = 'True'
    try:
        debugger.printEnabled = config['compo'].getboolean('print_enabled')
        seed = config['compo'].getint('seed')
    except ValueError as e:
        raise UsageError("bad config value: {}".format(e))
    if not 0 <= seed < SEED_LIMIT:
        raise UsageError("seed must lie in [0, {}): {}".format(SEED_LIMIT,
                                                               seed))

    os.makedirs(run_dir(), exist_ok=True)
    return args


#################
# Run directory #
#################

def run_dir():
    return config['compo']['out']


def run_path(name):
    return os.path.join(run_dir(), name)


def run_seed():
    return config['compo'].getint('seed')


def data_dir():
    return config['data']['path'] or run_dir()


def scene_seeds(split, count):
    offset = HELDOUT_OFFSET if split == 'heldout' else 0
    return [run_seed() * SEED_STRIDE + offset + n for n in range(count)]


def make_split(split):
    section = config['data']
    count = section.getint('n_heldout' if split == 'heldout' else 'n_train')
    return compo_synth.build_dataset(
        scene_seeds(split, count), section.getint('n_min'),
        section.getint('n_max'), section.getint('points'),
        section.getint('dim'), section.getint('grid'))


def load_split(split):
    """Read <data dir>/<split>.cmpd, or regenerate it from the seeds."""
    path = os.path.join(data_dir(), split + ".cmpd")
    if os.path.exists(path):
        return compo_synth.read_dataset(path)
    debugger.message("DATA", "No dataset at {}, generating {} scenes".format(
        path, split))
    return make_split(split)


def preview(points, layout, name, title='', lines=()):
    """Write one PNG under <run>/previews when rendering is enabled."""
    if not config['render'].getboolean('enabled'):
        return None
    if compo_globals.renderer is None:
        from compo_pygame import CompoPygame
        compo_globals.renderer = CompoPygame()
    os.makedirs(run_path("previews"), exist_ok=True)
    return compo_globals.renderer.render_scene(
        points, layout, os.path.join(run_path("previews"), name + ".png"),
        title=title, lines=lines)


def trained_model():
    return load_checkpoint(run_path(CHECKPOINT_NAME),
                           expected=ModelConfig.from_config())


def fresh_model():
    return CompoModel(ModelConfig.from_config(),
                      rng=compo_train.stream(run_seed(),
                                             compo_train.STREAM_INIT))


###############
# Subcommands #
###############

def command_gen_data(args):
    os.makedirs(data_dir(), exist_ok=True)
    for split, name in (('train', TRAIN_DATA), ('heldout', HELDOUT_DATA)):
        scenes = make_split(split)
        compo_synth.write_dataset(os.path.join(data_dir(), name), scenes)
    for index, scene in enumerate(scenes[:config['eval'].getint('count')]):
        preview(scene.points, scene.layout, "heldout_{}".format(index),
                title="held-out {}".format(index))
    compo_globals.config_write(run_path(CONFIG_NAME))


def command_train(args):
    compo_globals.config_write(run_path(CONFIG_NAME))
    model = fresh_model()
    init_from = config['train']['init_from']
    if init_from:
        load_parameters(model, init_from)
    scenes = load_split('train')
    codec = compo_train.codec_from_config(config)
    debugger.open_metrics(run_path(METRICS_NAME))
    trainer = compo_train.trainer_from_config(model, scenes, codec, config,
                                              run_seed(), args.steps)
    smoothed = trainer.run()
    debugger.close_metrics()
    save_checkpoint(model, run_path(CHECKPOINT_NAME))
    debugger.message("TRAN", "Final smoothed loss {:.6f}".format(
        smoothed[-1]))


def generation_settings(args):
    settings = compo_train.evaluation_settings(config)
    if args.steps is not None:
        settings['steps'] = args.steps
    if args.cfg_scale is not None:
        settings['cfg_scale'] = args.cfg_scale
    settings['components'] = args.components
    settings['seed'] = run_seed()
    return settings


def reference_scenes(args):
    count = args.count if args.count is not None else \
        config['eval'].getint('count')
    scenes = load_split('heldout')[:count]
    if not scenes:
        raise UsageError("no held-out scenes to condition on")
    return scenes


def command_sample(args):
    model = trained_model()
    codec = compo_train.codec_from_config(config)
    settings = generation_settings(args)
    samples = []
    for index, scene in enumerate(reference_scenes(args)):
        points = compo_train.generate(model, codec, scene, index, **settings)
        samples.append(compo_synth.Scene(points, scene.layout, scene.seed))
        preview(points, scene.layout, "sample_{}".format(index),
                title="sample {}".format(index))
    compo_synth.write_dataset(run_path(SAMPLES_DATA), samples)


def command_eval(args):
    codec = compo_train.codec_from_config(config)
    model = trained_model() if args.source == 'model' else fresh_model()
    settings = generation_settings(args)
    scenes = reference_scenes(args)
    rows, summary = compo_train.evaluate(model, scenes, codec,
                                         source=args.source, **settings)
    compo_train.write_table(rows + [dict(summary, scene='mean')],
                            run_path("eval_{}".format(args.source)))
    for key, value in summary.items():
        if key != 'source':
            debugger.message("EVAL", "mean {}: {:.6f}".format(key, value))
    if config['render'].getboolean('enabled'):
        for index, (scene, row) in enumerate(zip(scenes, rows)):
            points = scene.points if args.source == 'ground-truth' else \
                compo_train.generate(model, codec, scene, index, **settings)
            preview(points, scene.layout,
                    "eval_{}_{}".format(args.source, index),
                    title="{} {}".format(args.source, index),
                    lines=["cd {:.4f}".format(row['cd']),
                           "self-iou {:.4f}".format(row['self_iou'])])


def command_ablate(args):
    labels = (args.labels or config['ablate']['labels']).split(',')
    labels = [label.strip().upper() for label in labels if label.strip()]
    unknown = [label for label in labels
               if label not in compo_train.ABLATIONS]
    if unknown:
        raise UsageError("unknown ablation label: {}".format(
            ", ".join(unknown)))
    steps = args.steps if args.steps is not None else \
        config['ablate'].getint('steps')
    compo_globals.config_write(run_path(CONFIG_NAME))
    train_scenes = load_split('train')
    heldout = load_split('heldout')[:config['eval'].getint('count')]
    codec = compo_train.codec_from_config(config)
    debugger.open_metrics(run_path(METRICS_NAME))
    rows = compo_train.run_ablations(
        ModelConfig.from_config(), train_scenes, heldout, codec,
        labels=labels, seed=run_seed(),
        trainer=compo_train.trainer_settings(config, steps),
        evaluation=compo_train.evaluation_settings(config))
    debugger.close_metrics()
    compo_train.write_table(rows, run_path("ablation"))
    for row in rows:
        debugger.message("EVAL", "{} loss {:.5f} cd {:.5f}  {}".format(
            row['label'], row['final_loss'], row['cd'], row['description']))


def command_bench(args):
    section = config['bench']
    grid_path = args.grid or section['grid']
    grid = compo_bench.read_grid(grid_path) if grid_path else \
        compo_bench.default_grid(
            k_fraction=config['router'].getfloat('k_fraction'),
            sigma=config['moc'].getint('sigma'))
    report = compo_bench.bench_attention(
        grid,
        repeats=args.repeats if args.repeats is not None else
        section.getint('repeats'),
        warmup=section.getint('warmup'),
        chunk=section.getint('chunk'),
        parallel=args.parallel or section.getboolean('parallel'),
        seed=run_seed())
    report.write(args.report or run_path("bench.csv"))
    for N, ratio in report.ratios():
        debugger.message("BNCH", "N={} moc/dense global time {:.3f}".format(
            N, ratio))


COMMANDS = {'gen-data': command_gen_data,
            'train': command_train,
            'sample': command_sample,
            'eval': command_eval,
            'ablate': command_ablate,
            'bench': command_bench}


def compo_run(args):
    debugger.message("INFO", "Entering run state: {}".format(args.command))
    COMMANDS[args.command](args)
    debugger.message("INFO", "Finished {}".format(args.command))


def main(argv=None):
    try:
        args = compo_init(argv)
    except UsageError as e:
        debugger.message("EXCEPTION", "Usage: {}".format(e))
        return EXIT_USAGE
    try:
        compo_run(args)
    except UsageError as e:
        debugger.message("EXCEPTION", "Usage: {}".format(e))
        return EXIT_USAGE
    except CompoError as e:
        debugger.message("EXCEPTION", "{}: {}".format(type(e).__name__, e))
        return EXIT_RUNTIME
    except Exception as e:
        debugger.message("EXCEPTION", "Unexpected {}: {}".format(
            type(e).__name__, e))
        return EXIT_RUNTIME
    finally:
        debugger.close_metrics()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
