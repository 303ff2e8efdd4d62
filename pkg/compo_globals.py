"""
compo_globals - program globals for compo

This module handles program-wide globals: the debugger, the configuration
and the helpers that load and override it.


Requirements
------------
configparser : Basic configuration language parser.
compo_debugger : Error and info message handler for compo.
compo_errors : Exception types for compo.

Functions
---------
config_file_load : Accepts a (config_file) and attempts to load config options.
config_defaults : Reset config to the built-in defaults.
config_override : Apply a dotted section.key=value override.
config_write : Persist the effective config to a run directory.

Variables
---------
debugger : Global instance of CompoDebugger class for logging.
config : Global instance of configparser containing program options.
renderer : Scene preview renderer, None until previews are enabled.
color_* : Preview colours.
canvas_margin : Margin around every preview panel.
"""

import os
from configparser import ConfigParser
from compo_debugger import CompoDebugger
from compo_errors import ConfigError


debugger = CompoDebugger()  # Program-wide logger and debugger object

config = ConfigParser()  # Program-wide configuration object

renderer = None  # CompoPygame instance once scene previews are enabled

# Preview colours
color_black = (0, 0, 0)
color_orange = (255, 94, 19)
color_orange_25 = (64, 23, 4)
color_orange_50 = (128, 47, 9)
# One colour per component, cycled when a scene has more components
color_components = [(255, 94, 19), (19, 180, 255), (120, 220, 60),
                    (230, 60, 160), (250, 210, 40), (150, 110, 255),
                    (40, 220, 190), (240, 140, 110)]

# a global canvas_margin to offset all coordinate systems and give some
# room at the edges of every preview panel
canvas_margin = 10

# These defaults apply unless overridden by compo.cfg, --config or --set.
# Section and key names are the dotted config keys split at the dot:
# router.k_fraction is config['router']['k_fraction'].
DEFAULTS = {
    'compo': {'seed': '0',
              'out': 'runs/default',
              'print_enabled': 'True'},
    'model': {'width': '64',
              'heads': '4',
              'block_pairs': '4',
              'latent_dim': '8',
              'codebook_size': '50'},
    'router': {'k_fraction': '0.25',
               'activation': 'sigmoid',
               'multi_head': 'True',
               'load_balance': 'True'},
    'moc': {'sigma': '8',
            'gate_target': 'key',
            'use_compressed_context': 'True',
            'use_routing': 'True'},
    'flow': {'steps': '50',
             'cfg_scale': '4.0',
             'p_drop': '0.1'},
    'data': {'n_min': '4',
             'n_max': '4',
             'points': '32',
             'dim': '2',
             'grid': '8',
             'n_train': '64',
             'n_heldout': '8',
             'path': ''},
    'train': {'steps': '2000',
              'batch_size': '4',
              'lr': '2e-3',
              'warmup': '100',
              'lr_floor': '0.1',
              'weight_decay': '0.01',
              'beta1': '0.9',
              'beta2': '0.999',
              'eps': '1e-8',
              'clip_norm': '1.0',
              'smooth_window': '50',
              'init_from': ''},
    'eval': {'count': '8',
             'resolution': '0',
             'thresholds': '0.1,0.05'},
    'ablate': {'steps': '300',
               'labels': 'A,B,C,D,E,F,G'},
    'bench': {'grid': '',
              'repeats': '9',
              'warmup': '2',
              'parallel': 'False',
              'chunk': '4'},
    'render': {'enabled': 'False',
               'size': '640'},
}


def config_defaults():
    for section in config.sections():
        config.remove_section(section)
    config.read_dict(DEFAULTS)


def config_file_load(config_file):
    if not os.path.exists(config_file):
        debugger.message("INFO", "No config file at {}, using defaults".
                         format(config_file))
        return
    debugger.message("INFO", "Loading config file: {}".format(
        config_file))
    config.read(config_file)
    debugger.message("INFO", "Config Sections: {}".format(
        config.sections()))
    for section in config.sections():
        for cay in config[section]:
            debugger.message("INFO", "    Key: {}.{}, Value: {}".format(
                section, cay, config[section][cay]))


def config_override(assignment):
    """Apply one 'section.key=value' override.  Unknown keys raise
    ConfigError naming the key."""
    if '=' not in assignment:
        raise ConfigError("override must look like section.key=value: {}".
                          format(assignment))
    dotted, value = assignment.split('=', 1)
    dotted = dotted.strip()
    if '.' not in dotted:
        raise ConfigError("unknown config key: {}".format(dotted))
    section, cay = dotted.split('.', 1)
    if section not in config or cay.lower() not in config[section]:
        raise ConfigError("unknown config key: {}".format(dotted))
    config[section][cay] = value.strip()
    debugger.message("INFO", "Override: {} = {}".format(dotted,
                                                        value.strip()))


def config_write(path):
    with open(path, "w", encoding="utf-8") as config_file:
        config.write(config_file)
    debugger.message("INFO", "Wrote config: {}".format(path))


config_defaults()

# Load the config file values overtop of the defaults above:
config_file_load("compo.cfg")

debugger.printEnabled = config['compo'].getboolean('print_enabled')
