"""
evalkit/ablation.py

The ablation suites:

    skip    skip connections on vs off, per component
    inputs  sparse component alone / + RDF / + RDF with latent v_in, for
            LVADNet3D and UNet3D
    models  LVADNet3D vs UNet3D, per component and magnitude

Every (configuration, fold, seed) is trained from scratch on the fold's
train partition and scored on its test partition.
"""
import logging
import os
from dataclasses import dataclass, field

from flowgen.models import COMPONENTS
from networks.builder import build_model
from networks.models import LATENT, LVADNET3D, OFF, UNET3D, ModelConfig
from trainer.loop import train

from evalkit.evaluate import evaluate_components
from evalkit.models import (INPUTS_SUITE, MAGNITUDE, MODELS_SUITE, SKIP_SUITE,
                            SUITES, EvalError)
from evalkit.reports import mean_rows

LOGGER = logging.getLogger(__name__)

# sparse alone, sparse + RDF, sparse + RDF + latent v_in
INPUT_CONFIGURATIONS = (
    {'rdf': False, 'conditioning': OFF},
    {'rdf': True, 'conditioning': OFF},
    {'rdf': True, 'conditioning': LATENT},
)


@dataclass
class Variant:
    '''One configuration of a suite: a model config per trained component
    and the report rows the suite keeps from its evaluation'''
    base: ModelConfig
    components: tuple
    keep: tuple


@dataclass
class AblationResult:
    suite: str
    reports: list = field(default_factory=list)
    table: list = field(default_factory=list)


def _with_architecture(base, architecture):
    '''base re-targeted at another architecture, keeping its width,
    conditioning and inputs but taking the architecture's own schedule'''
    factory = ModelConfig.lvadnet3d if architecture == LVADNET3D else ModelConfig.unet3d
    return factory(base_channels=base.base_channels,
                   scale_divisor=base.scale_divisor, skips=base.skips,
                   conditioning=base.conditioning, rdf=base.rdf, seed=base.seed)


def suite_variants(suite, base, components=COMPONENTS, unet_base=None):
    '''Expands a suite into its variants. unet_base overrides the UNet3D
    configuration used by the inputs and models suites.'''
    if suite not in SUITES:
        raise EvalError('unknown ablation suite %r, expected one of %s'
                        % (suite, ', '.join(SUITES)))
    components = tuple(components)
    unet = unet_base or _with_architecture(base, UNET3D)
    if suite == SKIP_SUITE:
        return [Variant(base.replace(skips=skips), (component,), (component,))
                for component in components for skips in (True, False)]
    if suite == INPUTS_SUITE:
        # the magnitude needs all three components; a subset reports its own
        keep = (MAGNITUDE,) if components == COMPONENTS else components[:1]
        return [Variant(model_base.replace(**inputs), components, keep)
                for model_base in (base, unet)
                for inputs in INPUT_CONFIGURATIONS]
    keep = components + ((MAGNITUDE,) if components == COMPONENTS else ())
    return [Variant(base, components, keep), Variant(unet, components, keep)]


def run_ablation(suite, store, folds, base, train_cfg, seeds=(0,),
                 components=COMPONENTS, unet_base=None, peak=1.0,
                 in_mask=False, fit=True, output_dir=None, output_fn=None):
    '''Runs a suite over folds x seeds. Returns an AblationResult whose
    reports hold every scored row and whose table holds the mean per
    configuration. With fit=False the models are scored untrained.'''
    variants = suite_variants(suite, base, components, unet_base)
    total = len(variants) * len(folds) * len(seeds)
    done = 0
    result = AblationResult(suite=suite)
    for variant in variants:
        for split in folds:
            groups = store.fold_samples(split)
            train_samples = groups['train']
            val_samples = groups['val']
            test_samples = groups['test']
            for seed in seeds:
                models = {}
                for component in variant.components:
                    model = build_model(variant.base.replace(seed=seed))
                    if fit:
                        run_dir = None
                        if output_dir:
                            run_dir = os.path.join(
                                output_dir, '%s-%s-fold%d-seed%d-%s' % (
                                    suite, _tag(variant.base), split.fold,
                                    seed, component))
                        train(model, train_samples, val_samples,
                              train_cfg.replace(component=component, seed=seed),
                              output_dir=run_dir)
                    models[component] = model
                rows = evaluate_components(models, test_samples, fold=split.fold,
                                           seed=seed, peak=peak, in_mask=in_mask,
                                           require_all=False)
                result.reports.extend(r for r in rows if r.component in variant.keep)
                done += 1
                LOGGER.info('%s: %s fold %d seed %d done (%d/%d)', suite,
                            _tag(variant.base), split.fold, seed, done, total)
                if output_fn:
                    output_fn(message='Ablation %s %d/%d' % (suite, done, total),
                              percent_done=int(100 * done / total))
    result.table = mean_rows(result.reports, peak)
    return result


def _tag(cfg):
    parts = [cfg.architecture, 'skip' if cfg.skips else 'noskip',
             'rdf' if cfg.rdf else 'nordf', cfg.conditioning]
    return '-'.join(parts)
