import json
import traceback
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from latent_time import __version__
from latent_time.exceptions import (
    CheckpointIntegrityError, ContractError, LatentTimeError, NumericError, SpecMismatchError,
    TrainingDivergedError,
)
from latent_time.forms import schema
from latent_time.models import ExperimentRun
from latent_time.services import experiment_runner
from latent_time.services.experiment_config import load_experiment_config

EXIT_MISSING = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _origin(exc: BaseException) -> str:
    """Dotted module of the innermost latent_time frame that raised exc."""
    frames = traceback.extract_tb(exc.__traceback__)
    for frame in reversed(frames):
        path = Path(frame.filename)
        if "latent_time" in path.parts:
            parts = path.with_suffix("").parts
            return ".".join(parts[parts.index("latent_time"):])
    return "latent_time"


def numeric_message(exc: NumericError) -> str:
    where = _origin(exc)
    if isinstance(exc, TrainingDivergedError):
        return f"numeric failure in {where} at iteration {exc.iteration}: {exc}"
    return f"numeric failure in {where}: {exc}"


class Command(BaseCommand):
    help = "Train, evaluate, attack and report on latent-time neural ODE experiments"

    def add_arguments(self, parser):
        parser.add_argument(
            'action',
            choices=experiment_runner.ACTIONS,
            help='What to run: train, eval, attack, posterior-report, report, schema (or verify)'
        )
        parser.add_argument(
            '--config',
            type=str,
            default=None,
            help='Experiment JSON config (required for every action except report and schema)'
        )
        parser.add_argument(
            '--out',
            type=str,
            default=None,
            help='Output directory (default: output_dir from the config)'
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=None,
            help='Root seed; overrides the seed in the config'
        )

    def handle(self, *args, **options):
        action = options['action']

        if action == 'schema':
            self.stdout.write(json.dumps(schema(), sort_keys=True, indent=2))
            return

        run = ExperimentRun.objects.create(
            action=action,
            config_path=options['config'] or '',
            seed=options['seed'],
            output_dir=options['out'] or '',
            library_version=__version__,
        )
        try:
            self._dispatch(action, options, run)
        except CommandError as exc:
            self._finish(run, 'failed', exc.returncode, str(exc))
            raise
        except (ContractError, SpecMismatchError) as exc:
            self._fail(run, EXIT_CONFIG, str(exc))
        except NumericError as exc:
            self._fail(run, EXIT_NUMERIC, numeric_message(exc))
        except (OSError, CheckpointIntegrityError) as exc:
            self._fail(run, EXIT_IO, f"I/O failure: {exc}")
        except LatentTimeError as exc:
            self._fail(run, EXIT_CONFIG, str(exc))
        else:
            self._finish(run, 'succeeded', 0, '')

    def _dispatch(self, action, options, run):
        if action == 'report':
            out = options['out']
            if out is None:
                if options['config'] is None:
                    raise CommandError('report needs --out or --config', returncode=EXIT_CONFIG)
                out = load_experiment_config(options['config'], options['seed']).output_dir
            run.output_dir = out
            summary, missing = experiment_runner.emit_report(Path(out))
            self.stdout.write(json.dumps(summary, sort_keys=True, indent=2))
            if missing:
                raise CommandError(f"missing artifacts: {', '.join(missing)}", returncode=EXIT_MISSING)
            return

        if options['config'] is None:
            raise CommandError(f'{action} needs --config', returncode=EXIT_CONFIG)
        cfg = load_experiment_config(options['config'], options['seed'])
        out = Path(options['out'] or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        run.config_hash = cfg.config_hash
        run.seed = cfg.seed
        run.output_dir = str(out)
        run.save(update_fields=['config_hash', 'seed', 'output_dir'])

        self.stdout.write(self.style.SUCCESS('=' * 60))
        self.stdout.write(self.style.SUCCESS(f'  {action.upper()}  {cfg.model.variant} / {cfg.dataset.generator}'))
        self.stdout.write(self.style.SUCCESS('=' * 60))
        self.stdout.write(f'Seed: {cfg.seed}')
        self.stdout.write(f'Output: {out}')

        if action == 'verify':
            checks, passed = experiment_runner.run_verify(cfg, out)
            for name, check in sorted(checks.items()):
                status = self.style.SUCCESS('PASS') if check['passed'] else self.style.ERROR('FAIL')
                self.stdout.write(f'  {name:36s}: {status}')
            if not passed:
                raise CommandError('oracle checks failed, see verify.json', returncode=EXIT_MISSING)
            return

        summary = experiment_runner.RUNNERS[action](cfg, out)
        self.stdout.write('')
        self.stdout.write(json.dumps(experiment_runner.json_safe(summary), sort_keys=True, indent=2))
        self.stdout.write(self.style.SUCCESS(f'✓ {action} finished'))

    def _finish(self, run, status, code, message):
        run.status = status
        run.exit_code = code
        run.message = message
        run.finished_at = timezone.now()
        run.save()

    def _fail(self, run, code, message):
        self._finish(run, 'failed', code, message)
        raise CommandError(message, returncode=code)
