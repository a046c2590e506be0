from django.db import models


class ExperimentRun(models.Model):
    """One invocation of `manage.py run_experiment`."""

    STATUS_CHOICES = [
        ('running', 'Running'),
        ('succeeded', 'Succeeded'),
        ('failed', 'Failed'),
    ]

    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(blank=True, null=True)

    action = models.CharField(max_length=32)
    config_path = models.CharField(max_length=500, blank=True)
    config_hash = models.CharField(max_length=64, blank=True)
    seed = models.BigIntegerField(blank=True, null=True)
    output_dir = models.CharField(max_length=500, blank=True)
    library_version = models.CharField(max_length=20, blank=True)

    status = models.CharField(max_length=16, choices=STATUS_CHOICES, default='running')
    exit_code = models.PositiveSmallIntegerField(default=0)
    message = models.TextField(blank=True)

    class Meta:
        ordering = ['-started_at']
        verbose_name = 'Experiment Run'
        verbose_name_plural = 'Experiment Runs'

    def __str__(self):
        return f"{self.action} seed={self.seed} -> {self.output_dir} [{self.status}]"
