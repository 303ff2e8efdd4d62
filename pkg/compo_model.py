"""compo_model - the compositional diffusion transformer for compo

Pipeline for one scene of N components:

    Z_t [N, L, latent_dim]
      -> in-projection to width D
      -> packing into x_i = [z_i ; p_i ; anchor_i] plus random ID embeddings
      -> block_pairs x (local block, MoC global block)
      -> adaptive final layer on the z segments only
      -> velocity [N, L, latent_dim]

Timestep and condition embeddings are added into one modulation vector that
drives every block.  The final projection and every block gate start at
zero, so a fresh model predicts a velocity of exactly zero.

Checkpoints are an INI manifest (model config plus one `name = shape;offset`
entry per tensor) next to a little-endian float32 blob.


Requirements
------------
math : log for the timestep frequencies.
configparser : checkpoint manifest.
numpy : parameter init and the checkpoint blob.
compo_globals : debugger and config.
compo_numerics, compo_tokens, compo_local, compo_moc : the blocks.
compo_errors : ConfigError, CheckpointError, NumericsError, TokenError.

Classes
-------
ModelConfig : architecture and ablation switches.
Condition : layout embedding (or the learned null condition).
CompoModel : parameters plus forward().

Functions
---------
cfg_dropout(cond, p_drop, rng) : classifier-free guidance dropout.
save_checkpoint(model, path) / load_checkpoint(path) : manifest + blob.
load_parameters(model, path) : warm start from another run.
"""

import math
import os
from configparser import ConfigParser
import numpy as np
import compo_numerics as cn
import compo_tokens
import compo_local
import compo_moc
from compo_globals import debugger, config
from compo_errors import ConfigError, CheckpointError, NumericsError, \
    TokenError

MANIFEST_SUFFIX = ".manifest"
BLOB_SUFFIX = ".bin"


class ModelConfig(object):
    # name -> (config section, config key, type)
    FIELDS = {
        'width': ('model', 'width', int),
        'heads': ('model', 'heads', int),
        'block_pairs': ('model', 'block_pairs', int),
        'latent_dim': ('model', 'latent_dim', int),
        'codebook_size': ('model', 'codebook_size', int),
        'points': ('data', 'points', int),
        'grid': ('data', 'grid', int),
        'sigma': ('moc', 'sigma', int),
        'k_fraction': ('router', 'k_fraction', float),
        'router_activation': ('router', 'activation', str),
        'multi_head': ('router', 'multi_head', bool),
        'load_balance': ('router', 'load_balance', bool),
        'gate_target': ('moc', 'gate_target', str),
        'use_routing': ('moc', 'use_routing', bool),
        'use_compressed_context': ('moc', 'use_compressed_context', bool),
    }

    def __init__(self, **kwargs):
        self.width = kwargs.get('width', 64)
        self.heads = kwargs.get('heads', 4)
        self.block_pairs = kwargs.get('block_pairs', 4)
        self.latent_dim = kwargs.get('latent_dim', 8)
        self.codebook_size = kwargs.get('codebook_size',
                                        compo_tokens.CODEBOOK_SIZE)
        self.points = kwargs.get('points', 32)
        self.grid = kwargs.get('grid', 8)
        self.sigma = kwargs.get('sigma', 8)
        self.k_fraction = kwargs.get('k_fraction', 0.25)
        self.router_activation = kwargs.get('router_activation', 'sigmoid')
        self.multi_head = kwargs.get('multi_head', True)
        self.load_balance = kwargs.get('load_balance', True)
        self.gate_target = kwargs.get('gate_target', 'key')
        self.use_routing = kwargs.get('use_routing', True)
        self.use_compressed_context = kwargs.get('use_compressed_context',
                                                 True)
        # Not persisted: execution detail only
        self.chunk = kwargs.get('chunk', None)
        self.validate()

    def validate(self):
        if self.width % self.heads:
            raise ConfigError("model.width {} not divisible by model.heads {}".
                              format(self.width, self.heads))
        if self.block_pairs < 1:
            raise ConfigError("model.block_pairs must be >= 1")
        if self.router_activation not in ('sigmoid', 'softmax'):
            raise ConfigError("router.activation must be sigmoid or softmax")
        if self.gate_target not in compo_moc.GATE_TARGETS:
            raise ConfigError("moc.gate_target must be key or value")

    @property
    def n_p(self):
        return compo_tokens.compressed_count(self.points, self.sigma)

    @classmethod
    def from_config(cls, source=None, **overrides):
        source = config if source is None else source
        values = {}
        for name, (section, key, kind) in cls.FIELDS.items():
            if kind is bool:
                values[name] = source[section].getboolean(key)
            elif kind is int:
                values[name] = source[section].getint(key)
            elif kind is float:
                values[name] = source[section].getfloat(key)
            else:
                values[name] = source[section][key]
        values.update(overrides)
        return cls(**values)

    def as_strings(self):
        return {name: str(getattr(self, name)) for name in self.FIELDS}

    def __eq__(self, other):
        return isinstance(other, ModelConfig) and \
            self.as_strings() == other.as_strings()

    def __repr__(self):
        return "ModelConfig({})".format(", ".join(
            "{}={}".format(k, v) for k, v in self.as_strings().items()))


class Condition(object):
    def __init__(self, layout, embedding, null_embedding, null=False):
        self.layout = layout
        self.embedding = embedding  # Tensor [1, D]
        self.null_embedding = null_embedding
        self.null = null

    def dropped(self):
        return Condition(self.layout, self.null_embedding,
                         self.null_embedding, null=True)


def cfg_dropout(cond, p_drop, rng):
    if not 0.0 <= p_drop <= 1.0:
        raise ConfigError("flow.p_drop must lie in [0, 1]")
    if rng.random() < p_drop:
        return cond.dropped()
    return cond


def timestep_features(t, width):
    """Sinusoidal features of 1000 * t, [1, width]."""
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * float(t) * freqs
    features = np.concatenate([np.cos(args), np.sin(args)])
    if width % 2:
        features = np.concatenate([features, [0.0]])
    return features[None, :]


class CompoModel(object):
    def __init__(self, cfg, params=None, rng=None):
        self.cfg = cfg
        if params is None:
            params = cn.ParamStore()
            self.init_params(params, rng if rng is not None
                             else np.random.default_rng(0))
        self.params = params

    def init_params(self, params, rng):
        cfg = self.cfg
        width = cfg.width
        cn.init_linear(params.scope(''), 'embed', cfg.latent_dim, width, rng)
        compo_tokens.init_packer(params.scope('pack'), width, cfg.n_p, rng)
        compo_tokens.init_id_codebook(params.scope('ids'), width, rng,
                                      cfg.codebook_size)
        time_scope = params.scope('time')
        cn.init_linear(time_scope, 'l1', width, width, rng)
        cn.init_linear(time_scope, 'l2', width, width, rng)
        cond_scope = params.scope('cond')
        cn.init_linear(cond_scope, 'l1', cfg.grid * cfg.grid, width, rng)
        cond_scope.add('null', rng.normal(0.0, compo_tokens.INIT_STD,
                                          size=(1, width)))
        for n in range(cfg.block_pairs):
            pair = params.scope('pair{}'.format(n))
            compo_local.init_block(pair.scope('local'), width, rng)
            compo_moc.init_global_block(pair.scope('global'), width, rng)
        final = params.scope('final')
        cn.init_linear(final, 'ada', width, 2 * width, rng, zero=True)
        cn.init_linear(final, 'out', width, cfg.latent_dim, rng, zero=True)

    ##############
    # Embeddings #
    ##############

    def time_embedding(self, t):
        scope = self.params.scope('time')
        h = cn.linear(timestep_features(t, self.cfg.width), scope, 'l1')
        return cn.linear(cn.silu(h), scope, 'l2')

    def encode_condition(self, layout):
        """GELU(linear(flattened layout grid)) -> Condition"""
        layout = np.asarray(layout, dtype=np.float64)
        if layout.size != self.cfg.grid * self.cfg.grid:
            raise ConfigError("layout grid has {} cells, expected {}".format(
                layout.size, self.cfg.grid * self.cfg.grid))
        scope = self.params.scope('cond')
        embedding = cn.gelu(cn.linear(layout.reshape(1, -1), scope, 'l1'))
        return Condition(layout, embedding, scope['null'])

    def null_condition(self):
        null = self.params['cond.null']
        return Condition(None, null, null, null=True)

    ###########
    # Forward #
    ###########

    def check_input(self, Z_t):
        Z_t = cn.as_tensor(Z_t)
        if Z_t.ndim != 3 or Z_t.shape[-1] != self.cfg.latent_dim:
            raise NumericsError("expected latents [N, L, {}], got {}".format(
                self.cfg.latent_dim, Z_t.shape))
        if Z_t.shape[0] > self.cfg.codebook_size:
            raise TokenError("component count exceeds ID codebook ({} > {})".
                             format(Z_t.shape[0], self.cfg.codebook_size))
        if not np.all(np.isfinite(Z_t.value)):
            raise NumericsError("non-finite model input")
        return Z_t

    def pack(self, Z_t, ids):
        params = self.params
        z = cn.linear(Z_t, params.scope(''), 'embed')
        queries = compo_tokens.LearnableQueries(params.scope('pack'))
        codebook = compo_tokens.IdCodebook(params.scope('ids'))
        return compo_tokens.pack_tokens(z, queries, params.scope('pack'),
                                        codebook, ids)

    def readout(self, x, mod):
        scope = self.params.scope('final')
        ada = cn.linear(cn.silu(mod), scope, 'ada')
        width = self.cfg.width
        shift, scale = ada[..., :width], ada[..., width:]
        z = x.tokens[:, x.segments.z, :]
        return cn.linear(compo_local.modulate(z, shift, scale), scope, 'out')

    def forward_routed(self, Z_t, t, cond, rng=None, routings=None,
                       ids=None):
        """Returns (velocity [N, L, latent_dim], routing per block pair).

        rng switches global blocks to stochastic routing (training, when
        load balancing is on).  routings replays earlier decisions.  ids
        defaults to a draw from a generator seeded with 0."""
        Z_t = self.check_input(Z_t)
        if ids is None:
            ids = compo_tokens.assign_id_embeddings(
                Z_t.shape[0], self.cfg.codebook_size,
                np.random.default_rng(0))
        x = self.pack(Z_t, ids)
        mod = cn.add(self.time_embedding(t), cond.embedding)
        used = []
        for n in range(self.cfg.block_pairs):
            pair = self.params.scope('pair{}'.format(n))
            x = compo_local.local_block_forward(x, mod, pair.scope('local'),
                                                self.cfg.heads)
            x, routing = compo_moc.global_block_forward(
                x, mod, pair.scope('global'), self.cfg, rng=rng,
                routing=routings[n] if routings is not None else None)
            used.append(routing)
        return self.readout(x, mod), used

    def forward(self, Z_t, t, cond, rng=None, ids=None):
        return self.forward_routed(Z_t, t, cond, rng=rng, ids=ids)[0]


###############
# Checkpoints #
###############

def _manifest_parser():
    parser = ConfigParser()
    parser.optionxform = str
    return parser


def save_checkpoint(model, path):
    """Writes path + '.manifest' and path + '.bin'."""
    manifest = _manifest_parser()
    manifest['model'] = model.cfg.as_strings()
    manifest['tensors'] = {}
    offset = 0
    chunks = []
    for name, tensor in model.params.items():
        blob = np.ascontiguousarray(tensor.value, dtype='<f4').tobytes()
        manifest['tensors'][name] = "{};{}".format(
            ",".join(str(extent) for extent in tensor.shape), offset)
        chunks.append(blob)
        offset += len(blob)
    with open(path + BLOB_SUFFIX, "wb") as blob_file:
        for blob in chunks:
            blob_file.write(blob)
    with open(path + MANIFEST_SUFFIX, "w", encoding="utf-8") as manifest_file:
        manifest.write(manifest_file)
    debugger.message("CKPT", "Saved {} tensors ({} bytes) to {}".format(
        len(chunks), offset, path))


def _parse_entry(entry):
    shape, offset = entry.split(';')
    shape = tuple(int(extent) for extent in shape.split(',') if extent)
    return shape, int(offset)


def read_tensors(path):
    """path -> (ModelConfig, {name: float64 array})"""
    if not os.path.exists(path + MANIFEST_SUFFIX) or \
            not os.path.exists(path + BLOB_SUFFIX):
        raise CheckpointError("no checkpoint at {}".format(path))
    manifest = _manifest_parser()
    manifest.read(path + MANIFEST_SUFFIX, encoding="utf-8")
    if 'model' not in manifest or 'tensors' not in manifest:
        raise CheckpointError("malformed checkpoint manifest: {}".format(
            path + MANIFEST_SUFFIX))
    try:
        saved = ModelConfig.from_config(_manifest_as_config(manifest))
    except (KeyError, ValueError) as e:
        raise CheckpointError("malformed checkpoint config: {}".format(e))
    with open(path + BLOB_SUFFIX, "rb") as blob_file:
        blob = blob_file.read()
    tensors = {}
    for name, entry in manifest['tensors'].items():
        shape, offset = _parse_entry(entry)
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > len(blob):
            raise CheckpointError("tensor {} runs past the blob end".format(
                name))
        values = np.frombuffer(blob, dtype='<f4', count=count, offset=offset)
        tensors[name] = values.astype(np.float64).reshape(shape)
    return saved, tensors


def _manifest_as_config(manifest):
    """Lay the manifest's [model] keys out as the sections of
    ModelConfig.FIELDS so from_config() can read them."""
    parser = ConfigParser()
    for name, (section, key, kind) in ModelConfig.FIELDS.items():
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][key] = manifest['model'][name]
    return parser


def load_checkpoint(path, expected=None):
    saved, tensors = read_tensors(path)
    if expected is not None and saved != expected:
        differing = [name for name in ModelConfig.FIELDS
                     if str(getattr(saved, name)) !=
                     str(getattr(expected, name))]
        raise CheckpointError("checkpoint/config mismatch: {}".format(
            ", ".join(differing)))
    params = cn.ParamStore()
    for name, values in tensors.items():
        params.add(name, values)
    model = CompoModel(saved, params=params)
    fresh = CompoModel(saved, rng=np.random.default_rng(0)).params
    if sorted(fresh.names()) != sorted(params.names()):
        raise CheckpointError("checkpoint tensors do not match the model")
    debugger.message("CKPT", "Loaded {} tensors from {}".format(
        len(tensors), path))
    return model


def load_parameters(model, path):
    """Warm start: copy a checkpoint's tensors into model.  pack.p is kept
    fresh when the compressed-token count differs; any other shape
    mismatch is an error."""
    _, tensors = read_tensors(path)
    for name, tensor in model.params.items():
        if name not in tensors:
            raise CheckpointError("checkpoint has no tensor {}".format(name))
        if tensors[name].shape != tensor.shape:
            if name == 'pack.p':
                debugger.message("CKPT", "Rebuilt pack.p: {} -> {}".format(
                    tensors[name].shape, tensor.shape))
                continue
            raise CheckpointError("shape mismatch for {}: {} vs {}".format(
                name, tensors[name].shape, tensor.shape))
        tensor.value[...] = tensors[name]
    debugger.message("CKPT", "Initialized from {}".format(path))
