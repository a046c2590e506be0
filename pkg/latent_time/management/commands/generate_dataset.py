from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from latent_time.exceptions import ContractError
from latent_time.services.data_generator import GENERATORS, generate, save_csv


class Command(BaseCommand):
    help = "Write a synthetic dataset (foong1d or two_moons) as CSV with x_0..x_(D-1), y and split columns."

    def add_arguments(self, parser):
        parser.add_argument(
            "--generator",
            type=str,
            default="foong1d",
            choices=sorted(GENERATORS),
            help="Dataset generator",
        )
        parser.add_argument(
            "--n",
            type=int,
            default=None,
            help="Number of rows (generator default when omitted)",
        )
        parser.add_argument(
            "--noise-std",
            type=float,
            default=None,
            help="Observation noise (generator default when omitted)",
        )
        parser.add_argument(
            "--seed",
            type=int,
            default=0,
            help="Random seed for reproducibility",
        )
        parser.add_argument(
            "--outdir",
            type=str,
            default="datasets",
            help="Output folder (CSV will be saved here)",
        )
        parser.add_argument(
            "--output",
            type=str,
            default=None,
            help="Optional explicit filename. If not provided, auto-named from generator/seed/n.",
        )

    def handle(self, *args, **options):
        name = options["generator"]
        seed = options["seed"]
        params = {}
        if options["n"] is not None:
            params["n"] = options["n"]
        if options["noise_std"] is not None:
            params["noise_std"] = options["noise_std"]

        try:
            dataset = generate(name, seed=seed, **params)
        except ContractError as exc:
            raise CommandError(str(exc), returncode=2)

        output = options["output"] or f"{name}_n{len(dataset)}_seed{seed}.csv"
        outpath = save_csv(dataset, Path(options["outdir"]) / output)

        self.stdout.write(self.style.SUCCESS(f"✓ Saved {len(dataset)} rows to: {outpath}"))
        splits = sorted(set(dataset.split.tolist()))
        self.stdout.write(f"  Columns: {', '.join([f'x_{i}' for i in range(dataset.input_dim)] + ['y', 'split'])}")
        self.stdout.write(f"  Splits: {', '.join(splits)}")
