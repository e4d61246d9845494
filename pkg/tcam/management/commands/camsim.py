"""
`python manage.py camsim <subcommand> ...` runs the simulator CLI.

Arguments are handed to `tcam.cli.cli_main` untouched so both entry points
share one parser and one set of exit codes.
"""

import sys

from django.core.management.base import BaseCommand

from tcam.cli import cli_main


class Command(BaseCommand):
    help = 'Run a TCAM simulation subcommand (fit-device, truth-table, search, aar, ...).'

    def run_from_argv(self, argv):
        # argv is [manage.py, camsim, ...]
        sys.exit(cli_main(argv[2:], stdout=self.stdout, stderr=self.stderr))

    def handle(self, *args, **options):
        return None
