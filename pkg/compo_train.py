"""compo_train - training loop, evaluation and ablation sweeps for compo

Training draws scenes from the dataset, puts their latents on the flow path
at one shared t, drops the layout condition with probability p_drop, and
regresses the velocity.  Gradients of a batch are accumulated scene by scene
and applied with AdamW (decoupled weight decay, global-norm clipping).  The
learning rate warms up linearly and then follows a cosine down to
lr * lr_floor.

Every random stream is derived from the run seed, so a rerun reproduces
metrics.log byte for byte.


Requirements
------------
csv, json : report files.
math : sqrt.
numpy : random streams and statistics.
compo_globals : debugger.
compo_numerics : Tape.
compo_tokens : ID draws.
compo_model : CompoModel, cfg_dropout.
compo_flow : flow batches, loss and sampler.
compo_synth : codec and metrics.
compo_errors : ConfigError, DataError.

Classes
-------
AdamW : optimizer state and update.
Trainer : the training loop.

Functions
---------
evaluate(model, scenes, codec, source) : per-scene CD / F-score / self-IoU.
trainer_settings(config) / evaluation_settings(config) : kwargs from config.
codec_from_config(config) : the fixed latent codec for data.dim.
run_ablations(base_cfg, train_scenes, heldout, codec, labels) : A..G table.
write_table(rows, path) : CSV + JSON report.
"""

import csv
import json
import math
import numpy as np
import compo_numerics as cn
import compo_tokens
import compo_synth
from compo_globals import debugger
from compo_model import CompoModel, cfg_dropout
from compo_flow import make_flow_batch, fm_loss, sample
from compo_errors import ConfigError, DataError

# Random stream tags, combined with the run seed
STREAM_DATA = 11
STREAM_FLOW = 12
STREAM_ROUTING = 13
STREAM_IDS = 14
STREAM_DROP = 15
STREAM_INIT = 16
STREAM_CODEC_TAGS = 17
STREAM_EVAL = 21

ABLATIONS = {
    'A': ("no routing, compressed tokens only", {'use_routing': False}),
    'B': ("no compressed distant components",
          {'use_compressed_context': False}),
    'C': ("importance gates the values", {'gate_target': 'value'}),
    'D': ("softmax router activation", {'router_activation': 'softmax'}),
    'E': ("no load balance", {'load_balance': False}),
    'F': ("one routing shared by all heads", {'multi_head': False}),
    'G': ("full model", {}),
}

SOURCES = ('model', 'untrained', 'ground-truth')


def stream(seed, tag, *more):
    return np.random.default_rng([int(seed), tag] + [int(m) for m in more])


class AdamW(object):
    def __init__(self, params, **kwargs):
        self.params = params
        self.lr = kwargs.get('lr', 1e-3)
        self.beta1 = kwargs.get('beta1', 0.9)
        self.beta2 = kwargs.get('beta2', 0.999)
        self.eps = kwargs.get('eps', 1e-8)
        self.weight_decay = kwargs.get('weight_decay', 0.01)
        self.clip_norm = kwargs.get('clip_norm', 1.0)
        # Linear warmup to lr over warmup steps, then cosine decay to
        # lr * lr_floor at total_steps.  total_steps 0 keeps lr constant.
        self.warmup = kwargs.get('warmup', 0)
        self.total_steps = kwargs.get('total_steps', 0)
        self.lr_floor = kwargs.get('lr_floor', 1.0)
        self.m = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.step_count = 0

    def clip(self, grads):
        """Scales grads in place to global norm <= clip_norm; returns the
        norm before clipping."""
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
            for name in grads:
                grads[name] = grads[name] * scale
        return norm

    def lr_at(self, step):
        """Learning rate of the 1-based step."""
        if self.warmup and step <= self.warmup:
            return self.lr * step / self.warmup
        if not self.total_steps or self.total_steps <= self.warmup:
            return self.lr
        progress = min(1.0, (step - self.warmup) /
                       (self.total_steps - self.warmup))
        floor = self.lr * self.lr_floor
        return floor + 0.5 * (self.lr - floor) * \
            (1.0 + math.cos(math.pi * progress))

    def step(self, grads):
        norm = self.clip(grads)
        self.step_count += 1
        lr = self.lr_at(self.step_count)
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, param in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + \
                (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            param.value *= 1.0 - lr * self.weight_decay
            param.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm


def codec_from_config(config):
    # Fixed seed: every run encodes and decodes with the same codec
    return compo_synth.LatentCodec(config['data'].getint('dim'),
                                   config['model'].getint('latent_dim'),
                                   seed=0)


def scene_latents(scene, codec):
    return codec.encode(scene.points,
                        rng=stream(scene.seed or 0, STREAM_CODEC_TAGS))


class Trainer(object):
    def __init__(self, model, scenes, codec, **kwargs):
        if not scenes:
            raise DataError("no training scenes")
        self.model = model
        self.scenes = scenes
        self.codec = codec
        self.steps = kwargs.get('steps', 2000)
        self.batch_size = kwargs.get('batch_size', 4)
        self.p_drop = kwargs.get('p_drop', 0.1)
        self.smooth_window = kwargs.get('smooth_window', 50)
        self.seed = kwargs.get('seed', 0)
        self.log_every = kwargs.get('log_every', 50)
        self.optimizer = AdamW(
            model.params, lr=kwargs.get('lr', 2e-3),
            beta1=kwargs.get('beta1', 0.9), beta2=kwargs.get('beta2', 0.999),
            eps=kwargs.get('eps', 1e-8),
            weight_decay=kwargs.get('weight_decay', 0.01),
            clip_norm=kwargs.get('clip_norm', 1.0),
            warmup=kwargs.get('warmup', 100), total_steps=self.steps,
            lr_floor=kwargs.get('lr_floor', 0.1))

        self.latents = [scene_latents(scene, codec) for scene in scenes]
        self.data_rng = stream(self.seed, STREAM_DATA)
        self.flow_rng = stream(self.seed, STREAM_FLOW)
        self.routing_rng = stream(self.seed, STREAM_ROUTING)
        self.id_rng = stream(self.seed, STREAM_IDS)
        self.drop_rng = stream(self.seed, STREAM_DROP)

        self.losses = []
        self.smoothed = []

    def example_loss(self, index):
        """Forward one scene on the flow path; must run inside a Tape."""
        model = self.model
        scene = self.scenes[index]
        batch = make_flow_batch(self.latents[index], self.flow_rng)
        ids = compo_tokens.assign_id_embeddings(
            scene.n_components, model.cfg.codebook_size, self.id_rng)
        cond = cfg_dropout(model.encode_condition(scene.layout), self.p_drop,
                           self.drop_rng)
        pred = model.forward(batch.Z_t, batch.t, cond, rng=self.routing_rng,
                             ids=ids)
        return fm_loss(pred, batch.target)

    def train_step(self):
        params = self.model.params
        params.zero_grad()
        total = 0.0
        for _ in range(self.batch_size):
            index = int(self.data_rng.integers(len(self.scenes)))
            with cn.Tape() as tape:
                loss = self.example_loss(index)
                tape.backward(cn.mul(loss, 1.0 / self.batch_size))
            total += float(loss.value)
        norm = self.optimizer.step(params.grads())
        loss = total / self.batch_size
        self.losses.append(loss)
        window = self.losses[-self.smooth_window:]
        self.smoothed.append(float(np.mean(window)))
        return loss, norm

    def run(self):
        debugger.message("TRAN", "Training {} steps, batch {}, {} scenes, "
                         "{} parameters".format(
                             self.steps, self.batch_size, len(self.scenes),
                             self.model.params.num_elements()))
        for step in range(1, self.steps + 1):
            loss, norm = self.train_step()
            debugger.perf_monitor()
            debugger.log_stat("Training steps", 1)
            debugger.metric("step {} loss {:.6f} smooth {:.6f} gnorm {:.6f}".
                            format(step, loss, self.smoothed[-1], norm))
            if step == 1 or step % self.log_every == 0:
                debugger.message("TRAN", "step {} loss {:.5f} smooth {:.5f}".
                                 format(step, loss, self.smoothed[-1]))
        return self.smoothed


def trainer_settings(config, steps=None):
    section = config['train']
    return {'steps': steps if steps is not None else section.getint('steps'),
            'batch_size': section.getint('batch_size'),
            'lr': section.getfloat('lr'),
            'beta1': section.getfloat('beta1'),
            'beta2': section.getfloat('beta2'),
            'eps': section.getfloat('eps'),
            'weight_decay': section.getfloat('weight_decay'),
            'clip_norm': section.getfloat('clip_norm'),
            'warmup': section.getint('warmup'),
            'lr_floor': section.getfloat('lr_floor'),
            'smooth_window': section.getint('smooth_window'),
            'p_drop': config['flow'].getfloat('p_drop')}


def trainer_from_config(model, scenes, codec, config, seed, steps=None):
    return Trainer(model, scenes, codec, seed=seed,
                   **trainer_settings(config, steps))


##############
# Evaluation #
##############

def evaluation_settings(config):
    try:
        thresholds = tuple(float(tau) for tau in
                           config['eval']['thresholds'].split(','))
    except ValueError:
        raise ConfigError("eval.thresholds must be comma separated numbers")
    return {'steps': config['flow'].getint('steps'),
            'cfg_scale': config['flow'].getfloat('cfg_scale'),
            'resolution': config['eval'].getint('resolution'),
            'thresholds': thresholds}


def zero_velocity(Z, t):
    return np.zeros_like(Z)


def generate(model, codec, scene, index, **kwargs):
    """Decoded point sets [N, L, dim] for one reference scene."""
    source = kwargs.get('source', 'model')
    if source == 'ground-truth':
        return scene.points
    seed = kwargs.get('seed', 0)
    rng = stream(seed, STREAM_EVAL, index)
    N = kwargs.get('components') or scene.n_components
    cond = model.encode_condition(scene.layout)
    Z = sample(model, N, kwargs.get('steps', 50), cond,
               kwargs.get('cfg_scale', 4.0), rng,
               L=kwargs.get('points'),
               velocity=zero_velocity if source == 'untrained' else None)
    return codec.decode(Z)


def evaluate(model, scenes, codec, **kwargs):
    """Returns (rows, summary) comparing generated scenes with scenes."""
    source = kwargs.get('source', 'model')
    if source not in SOURCES:
        raise ConfigError("unknown evaluation source: {}".format(source))
    thresholds = kwargs.get('thresholds', (0.1, 0.05))
    resolution = kwargs.get('resolution') or None
    rows = []
    for index, scene in enumerate(scenes):
        generated = generate(model, codec, scene, index, **kwargs)
        fused = generated.reshape(-1, generated.shape[-1])
        truth = scene.points.reshape(-1, scene.points.shape[-1])
        row = {'scene': index, 'source': source,
               'N': scene.n_components,
               'cd': compo_synth.chamfer(fused, truth)}
        for tau in thresholds:
            row['f@{}'.format(tau)] = compo_synth.fscore(fused, truth, tau)
        row['self_iou'] = compo_synth.self_iou(list(generated), resolution)
        rows.append(row)
        debugger.message("EVAL", "scene {} ({}) cd {:.4f} self-iou {:.4f}".
                         format(index, source, row['cd'], row['self_iou']))
    summary = {key: float(np.mean([row[key] for row in rows]))
               for key in rows[0] if key not in ('scene', 'source', 'N')}
    summary['source'] = source
    return rows, summary


def write_table(rows, path):
    """rows (list of dicts) -> path.csv and path.json"""
    fields = []
    for row in rows:
        fields.extend(key for key in row if key not in fields)
    with open(path + ".csv", "w", newline="", encoding="utf-8") as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    with open(path + ".json", "w", encoding="utf-8") as json_file:
        json.dump(rows, json_file, indent=2)
    debugger.message("INFO", "Wrote {}.csv / .json ({} rows)".format(
        path, len(rows)))


#############
# Ablations #
#############

def run_ablations(base_cfg, train_scenes, heldout, codec, **kwargs):
    """Train and evaluate every requested label of ABLATIONS in turn."""
    labels = kwargs.get('labels', sorted(ABLATIONS))
    seed = kwargs.get('seed', 0)
    trainer_kwargs = dict(kwargs.get('trainer', {}))
    eval_kwargs = dict(kwargs.get('evaluation', {}))
    rows = []
    for label in labels:
        if label not in ABLATIONS:
            raise ConfigError("unknown ablation label: {}".format(label))
        description, overrides = ABLATIONS[label]
        values = {name: getattr(base_cfg, name) for name in base_cfg.FIELDS}
        values.update(overrides)
        cfg = type(base_cfg)(**values)
        debugger.message("TRAN", "Ablation {}: {}".format(label,
                                                          description))
        model = CompoModel(cfg, rng=stream(seed, STREAM_INIT))
        trainer = Trainer(model, train_scenes, codec, seed=seed,
                          **trainer_kwargs)
        smoothed = trainer.run()
        _, summary = evaluate(model, heldout, codec, seed=seed,
                              **eval_kwargs)
        row = {'label': label, 'description': description,
               'final_loss': smoothed[-1]}
        row.update({key: value for key, value in summary.items()
                    if key != 'source'})
        rows.append(row)
    return rows
