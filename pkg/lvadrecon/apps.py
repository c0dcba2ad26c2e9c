from django.apps import AppConfig

class LvadreconConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'lvadrecon'

    def ready(self):
        import lvadrecon.checks
