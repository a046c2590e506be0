from django.apps import AppConfig


class LatentTimeConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'latent_time'
    verbose_name = 'Latent-time neural ODEs'
